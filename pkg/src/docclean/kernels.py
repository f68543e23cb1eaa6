"""Hot loops of the E-step.

Every quantity the inference code needs reduces to the per-cell log-ratio

    delta(c, x, i) = log(alpha * N(y_d; w, phi) / H_B(y_d) + (1 - alpha)),
    d = (i + x) mod D

summed over some set of pattern cells. The joint log-probability of
(c, x, Y) is then ``total_bg + sum_i delta + log_prior``.

Each kernel exists twice: a numba version (``_nb_*``) and a vectorised numpy
version (``_np_*``). The public functions dispatch on the active backend,
which defaults to numba and can be switched off with the
``DOCCLEAN_DISABLE_NUMBA`` environment variable or :func:`use_backend`.
"""
import contextlib
import math
from typing import NamedTuple

import numpy as np

from . import _accel

_CHUNK = 1 << 21  # float64 entries per temporary block in the numpy path

_backend = _accel.default_backend()


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _accel.HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    old = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)


class Prepared(NamedTuple):
    """Model parameters flattened over pattern cells, with logs precomputed."""
    W: np.ndarray          # (C, P, F)
    inv_phi: np.ndarray    # (C, P, F)
    gconst: np.ndarray     # (C, P)  -0.5 * sum_f log(2 pi phi)
    log_a: np.ndarray      # (C, P)
    log_1ma: np.ndarray    # (C, P)
    h: np.ndarray          # (C, P)  log(alpha) + gconst - log(1 - alpha)
    kind: np.ndarray       # (C, P)  0: alpha == 0, 1: alpha == 1, 2: otherwise
    P1: int
    P2: int


def prepare(W, phi, alpha):
    C, P1, P2, F = W.shape
    W = np.ascontiguousarray(W.reshape(C, P1 * P2, F), dtype=np.float64)
    phi = phi.reshape(C, P1 * P2, F).astype(np.float64)
    alpha = alpha.reshape(C, P1 * P2).astype(np.float64)
    with np.errstate(divide="ignore"):
        log_a = np.log(alpha)
        log_1ma = np.log1p(-alpha)
    gconst = -0.5 * np.log(2.0 * np.pi * phi).sum(axis=-1)
    kind = np.full(alpha.shape, 2, dtype=np.int8)
    kind[alpha == 0.0] = 0
    kind[alpha == 1.0] = 1
    h = np.where(kind == 2, log_a + gconst - np.where(kind == 2, log_1ma, 0.0), 0.0)
    return Prepared(
        W=W,
        inv_phi=np.ascontiguousarray(1.0 / phi),
        gconst=np.ascontiguousarray(gconst),
        log_a=np.ascontiguousarray(log_a),
        log_1ma=np.ascontiguousarray(log_1ma),
        h=np.ascontiguousarray(h),
        kind=kind,
        P1=P1,
        P2=P2,
    )


# ---------------------------------------------------------------------------
# numba kernels
#
# Per pattern cell the log-ratio is written as lb + softplus(h - q/2 - bg) with
# h = log(alpha) + gconst - log(1 - alpha). Cells with alpha == 0 contribute
# exactly 0 and are skipped (kind 0); cells with alpha == 1 reduce to
# gconst - q/2 - bg (kind 1).

if _accel.HAVE_NUMBA:
    from numba import njit, prange

    # Saturated cells skip the transcendental calls. Above z = 37 the results
    # are exact (z + exp(-z) == z, sigmoid rounds to 1); below z = -37 terms of
    # at most 8.5e-17 are dropped, under the rounding noise of the cell sums.

    @njit(cache=True, inline="always")
    def _nb_softplus(z):
        if z > 37.0:
            return z
        if z < -37.0:
            return 0.0
        if z > 0.0:
            return z + math.log1p(math.exp(-z))
        return math.log1p(math.exp(z))

    @njit(cache=True, inline="always")
    def _nb_sigmoid(z):
        if z > 37.0:
            return 1.0
        if z < -37.0:
            return 0.0
        if z > 0.0:
            return 1.0 / (1.0 + math.exp(-z))
        t = math.exp(z)
        return t / (1.0 + t)

    # Vectorisable softplus over a buffer, used by the selection pass where
    # almost every cell needs one. exp(-a) for a in [0, 37] is a degree-13
    # Taylor polynomial after reduction by ln 2, with 2**k assembled from its
    # exponent bits; log1p(u) for u in [0, 1] is an atanh series after
    # reduction to |s| <= 3 - 2 sqrt(2). Both are within 3 ulp of libm.
    # Clamping |z| at 37 changes each result by at most 8.5e-17.

    _INV_LN2 = 1.4426950408889634
    _LN2_HI = 6.93147180369123816490e-01
    _LN2_LO = 1.90821492927058770002e-10
    _LN2 = 0.6931471805599453
    _SQRT2M1 = 0.41421356237309503

    @njit(cache=True, error_model="numpy", inline="always")
    def _nb_softplus_add(z, n, mant, ebits, acc):
        """acc[j] += softplus(z[j]) for j < n."""
        for j in range(n):
            t = -min(abs(z[j]), 37.0)
            k = math.floor(t * _INV_LN2 + 0.5)
            r = (t - k * _LN2_HI) - k * _LN2_LO
            p = 1.0 / 6227020800.0
            p = p * r + 1.0 / 479001600.0
            p = p * r + 1.0 / 39916800.0
            p = p * r + 1.0 / 3628800.0
            p = p * r + 1.0 / 362880.0
            p = p * r + 1.0 / 40320.0
            p = p * r + 1.0 / 5040.0
            p = p * r + 1.0 / 720.0
            p = p * r + 1.0 / 120.0
            p = p * r + 1.0 / 24.0
            p = p * r + 1.0 / 6.0
            p = p * r + 0.5
            p = p * r + 1.0
            mant[j] = p * r + 1.0
            ebits[j] = (np.int64(k) + 1023) << 52
        scale = ebits.view(np.float64)
        for j in range(n):
            u = mant[j] * scale[j]
            hi = u > _SQRT2M1
            num = u - 1.0 if hi else u
            den = u + 3.0 if hi else u + 2.0
            base = _LN2 if hi else 0.0
            s = num / den
            s2 = s * s
            p = 2.0 / 21.0
            p = p * s2 + 2.0 / 19.0
            p = p * s2 + 2.0 / 17.0
            p = p * s2 + 2.0 / 15.0
            p = p * s2 + 2.0 / 13.0
            p = p * s2 + 2.0 / 11.0
            p = p * s2 + 2.0 / 9.0
            p = p * s2 + 2.0 / 7.0
            p = p * s2 + 2.0 / 5.0
            p = p * s2 + 2.0 / 3.0
            p = p * s2 + 2.0
            acc[j] += max(z[j], 0.0) + base + s * p

    @njit(cache=True, parallel=True, error_model="numpy")
    def _nb_delta_sums(Y, logbg, W, inv_phi, gconst, h, log_1ma, kind, sel, P2, out):
        D1, D2, F = Y.shape
        C, L = sel.shape
        for x1 in prange(D1):
            z = np.empty(D2)
            mant = np.empty(D2)
            ebits = np.empty(D2, dtype=np.int64)
            acc = np.empty(D2)
            for c in range(C):
                acc[:] = 0.0
                for l in range(L):
                    p = sel[c, l]
                    kd = kind[c, p]
                    if kd == 0:
                        continue
                    i1 = p // P2
                    i2 = p - i1 * P2
                    d1 = i1 + x1
                    if d1 >= D1:
                        d1 -= D1
                    base = gconst[c, p] if kd == 1 else h[c, p]
                    for x2 in range(D2):
                        d2 = i2 + x2
                        if d2 >= D2:
                            d2 -= D2
                        q = 0.0
                        for f in range(F):
                            r = Y[d1, d2, f] - W[c, p, f]
                            q += r * r * inv_phi[c, p, f]
                        z[x2] = base - 0.5 * q - logbg[d1, d2]
                    if kd == 1:
                        for x2 in range(D2):
                            acc[x2] += z[x2]
                    else:
                        lb = log_1ma[c, p]
                        for x2 in range(D2):
                            acc[x2] += lb
                        _nb_softplus_add(z, D2, mant, ebits, acc)
                for x2 in range(D2):
                    out[c, x1, x2] = acc[x2]

    @njit(cache=True, inline="always")
    def _nb_cell_z(Y, logbg, W, inv_phi, gconst, h, kd, c, p, d1, d2):
        F = Y.shape[2]
        q = 0.0
        for f in range(F):
            r = Y[d1, d2, f] - W[c, p, f]
            q += r * r * inv_phi[c, p, f]
        base = gconst[c, p] if kd == 1 else h[c, p]
        return base - 0.5 * q - logbg[d1, d2]

    @njit(cache=True, parallel=True)
    def _nb_candidate_sums(Y, logbg, W, inv_phi, gconst, h, log_1ma, kind, P2, cc, cx1, cx2, out):
        D1, D2, F = Y.shape
        P = W.shape[1]
        for k in prange(cc.shape[0]):
            c = cc[k]
            acc = 0.0
            for p in range(P):
                kd = kind[c, p]
                if kd == 0:
                    continue
                i1 = p // P2
                d1 = (i1 + cx1[k]) % D1
                d2 = (p - i1 * P2 + cx2[k]) % D2
                z = _nb_cell_z(Y, logbg, W, inv_phi, gconst, h, kd, c, p, d1, d2)
                if kd == 1:
                    acc += z
                else:
                    acc += log_1ma[c, p] + _nb_softplus(z)
            out[k] = acc

    @njit(cache=True, parallel=True)
    def _nb_mask_posteriors(Y, logbg, W, inv_phi, gconst, h, kind, P2, cc, cx1, cx2, out):
        D1, D2, F = Y.shape
        P = W.shape[1]
        for k in prange(cc.shape[0]):
            c = cc[k]
            for p in range(P):
                kd = kind[c, p]
                if kd == 0:
                    out[k, p] = 0.0
                elif kd == 1:
                    out[k, p] = 1.0
                else:
                    i1 = p // P2
                    d1 = (i1 + cx1[k]) % D1
                    d2 = (p - i1 * P2 + cx2[k]) % D2
                    z = _nb_cell_z(Y, logbg, W, inv_phi, gconst, h, kd, c, p, d1, d2)
                    out[k, p] = _nb_sigmoid(z)

    @njit(cache=True)
    def _nb_accumulate(Y, logbg, W, inv_phi, gconst, h, kind, P2,
                       cc, cx1, cx2, qk, n_c, s_a, s_w, s_w2):
        D1, D2, F = Y.shape
        P = W.shape[1]
        for k in range(cc.shape[0]):
            w = qk[k]
            if w == 0.0:
                continue
            c = cc[k]
            n_c[c] += w
            for p in range(P):
                kd = kind[c, p]
                if kd == 0:
                    continue
                i1 = p // P2
                d1 = (i1 + cx1[k]) % D1
                d2 = (p - i1 * P2 + cx2[k]) % D2
                if kd == 1:
                    r_cp = w
                else:
                    z = _nb_cell_z(Y, logbg, W, inv_phi, gconst, h, kd, c, p, d1, d2)
                    r_cp = w * _nb_sigmoid(z)
                s_a[c, p] += r_cp
                for f in range(F):
                    y = Y[d1, d2, f]
                    s_w[c, p, f] += r_cp * y
                    s_w2[c, p, f] += r_cp * y * y


# ---------------------------------------------------------------------------
# numpy kernels


def _np_cell_logratio(Yg, bgg, w, inv_phi, g, la):
    """log(alpha * N / H_B) for gathered cells; trailing axis is F."""
    q = np.einsum("...f,...f->...", (Yg - w) ** 2, inv_phi)
    return la + g - 0.5 * q - bgg


def _np_delta_sums(Y, logbg, prep, sel, out):
    D1, D2, F = Y.shape
    C, L = sel.shape
    ar1 = np.arange(D1)
    ar2 = np.arange(D2)
    step = max(1, _CHUNK // (D1 * D2 * F))
    for c in range(C):
        acc = np.zeros((D1, D2))
        for lo in range(0, L, step):
            p = sel[c, lo:lo + step]
            i1, i2 = np.divmod(p, prep.P2)
            d1 = (i1[:, None] + ar1[None, :]) % D1
            d2 = (i2[:, None] + ar2[None, :]) % D2
            Yg = Y[d1[:, :, None], d2[:, None, :]]        # (l, D1, D2, F)
            bgg = logbg[d1[:, :, None], d2[:, None, :]]
            with np.errstate(invalid="ignore"):
                a = _np_cell_logratio(
                    Yg, bgg,
                    prep.W[c, p][:, None, None, :],
                    prep.inv_phi[c, p][:, None, None, :],
                    prep.gconst[c, p][:, None, None],
                    prep.log_a[c, p][:, None, None],
                )
            acc += np.logaddexp(a, prep.log_1ma[c, p][:, None, None]).sum(axis=0)
        out[c] = acc


def _np_gather_candidates(Y, logbg, prep, cc, cx1, cx2):
    D1, D2, _ = Y.shape
    P = prep.W.shape[1]
    i1, i2 = np.divmod(np.arange(P), prep.P2)
    d1 = (i1[None, :] + cx1[:, None]) % D1
    d2 = (i2[None, :] + cx2[:, None]) % D2
    a = _np_cell_logratio(
        Y[d1, d2], logbg[d1, d2], prep.W[cc], prep.inv_phi[cc], prep.gconst[cc], prep.log_a[cc]
    )
    return a, prep.log_1ma[cc], Y[d1, d2]


def _np_post(a, b):
    with np.errstate(invalid="ignore", over="ignore"):
        post = np.exp(a - np.logaddexp(a, b))
    post = np.where(a == -np.inf, 0.0, post)
    return np.where(b == -np.inf, 1.0, post)


def _np_chunks(K, P, F):
    step = max(1, _CHUNK // max(1, P * F))
    return range(0, K, step), step


def _np_candidate_sums(Y, logbg, prep, cc, cx1, cx2, out):
    rng, step = _np_chunks(len(cc), prep.W.shape[1], Y.shape[2])
    for lo in rng:
        s = slice(lo, lo + step)
        a, b, _ = _np_gather_candidates(Y, logbg, prep, cc[s], cx1[s], cx2[s])
        out[s] = np.logaddexp(a, b).sum(axis=1)


def _np_mask_posteriors(Y, logbg, prep, cc, cx1, cx2, out):
    rng, step = _np_chunks(len(cc), prep.W.shape[1], Y.shape[2])
    for lo in rng:
        s = slice(lo, lo + step)
        a, b, _ = _np_gather_candidates(Y, logbg, prep, cc[s], cx1[s], cx2[s])
        out[s] = _np_post(a, b)


def _np_accumulate(Y, logbg, prep, cc, cx1, cx2, qk, n_c, s_a, s_w, s_w2):
    keep = qk != 0.0
    cc, cx1, cx2, qk = cc[keep], cx1[keep], cx2[keep], qk[keep]
    rng, step = _np_chunks(len(cc), prep.W.shape[1], Y.shape[2])
    for lo in rng:
        s = slice(lo, lo + step)
        a, b, Yg = _np_gather_candidates(Y, logbg, prep, cc[s], cx1[s], cx2[s])
        r = qk[s, None] * _np_post(a, b)                   # (k, P)
        for c in np.unique(cc[s]):
            m = cc[s] == c
            n_c[c] += qk[s][m].sum()
            s_a[c] += r[m].sum(axis=0)
            s_w[c] += np.einsum("kp,kpf->pf", r[m], Yg[m])
            s_w2[c] += np.einsum("kp,kpf->pf", r[m], Yg[m] ** 2)


# ---------------------------------------------------------------------------
# dispatch


def _as_int(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def delta_sums(Y, logbg, prep, sel):
    """Sum of per-cell log-ratios over the pattern cells ``sel[c]``.

    Returns a (C, D1, D2) array indexed by class and position.
    """
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    logbg = np.ascontiguousarray(logbg, dtype=np.float64)
    sel = _as_int(sel)
    out = np.empty((sel.shape[0],) + Y.shape[:2])
    if _backend == "numba":
        _nb_delta_sums(Y, logbg, prep.W, prep.inv_phi, prep.gconst, prep.h,
                       prep.log_1ma, prep.kind, sel, prep.P2, out)
    else:
        _np_delta_sums(Y, logbg, prep, sel, out)
    return out


def candidate_sums(Y, logbg, prep, cc, cx1, cx2):
    """Full-pattern log-ratio sums for an explicit list of (c, x) pairs."""
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    logbg = np.ascontiguousarray(logbg, dtype=np.float64)
    cc, cx1, cx2 = _as_int(cc), _as_int(cx1), _as_int(cx2)
    out = np.empty(len(cc))
    if _backend == "numba":
        _nb_candidate_sums(Y, logbg, prep.W, prep.inv_phi, prep.gconst, prep.h,
                           prep.log_1ma, prep.kind, prep.P2, cc, cx1, cx2, out)
    else:
        _np_candidate_sums(Y, logbg, prep, cc, cx1, cx2, out)
    return out


def mask_posteriors(Y, logbg, prep, cc, cx1, cx2):
    """p(m_i = 1 | Y, c, x) for each listed pair; shape (K, P1*P2)."""
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    logbg = np.ascontiguousarray(logbg, dtype=np.float64)
    cc, cx1, cx2 = _as_int(cc), _as_int(cx1), _as_int(cx2)
    out = np.empty((len(cc), prep.W.shape[1]))
    if _backend == "numba":
        _nb_mask_posteriors(Y, logbg, prep.W, prep.inv_phi, prep.gconst, prep.h,
                            prep.kind, prep.P2, cc, cx1, cx2, out)
    else:
        _np_mask_posteriors(Y, logbg, prep, cc, cx1, cx2, out)
    return out


def accumulate(Y, logbg, prep, cc, cx1, cx2, qk, stats):
    """Add q-weighted sufficient statistics of one patch into ``stats``.

    ``stats`` is ``(n_c, s_a, s_w, s_w2)`` with shapes (C,), (C, P),
    (C, P, F), (C, P, F); updated in place. Pairs with q == 0 are skipped.
    """
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    logbg = np.ascontiguousarray(logbg, dtype=np.float64)
    cc, cx1, cx2 = _as_int(cc), _as_int(cx1), _as_int(cx2)
    qk = np.ascontiguousarray(qk, dtype=np.float64)
    if _backend == "numba":
        _nb_accumulate(Y, logbg, prep.W, prep.inv_phi, prep.gconst, prep.h,
                       prep.kind, prep.P2, cc, cx1, cx2, qk, *stats)
    else:
        _np_accumulate(Y, logbg, prep, cc, cx1, cx2, qk, *stats)
