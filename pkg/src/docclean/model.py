"""Translation-invariant pattern model.

A patch of D1 x D2 feature vectors contains one pattern of class c placed at
position x with cyclic wrap-around. Pattern cell i covers patch cell
(i + x) mod D; there the feature is drawn from a diagonal Gaussian if the
cell's mask bit is set, and from the background histogram otherwise. Every
patch cell outside the shifted pattern window is background.

Indices are 0-based throughout.
"""
from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class ModelParams:
    """Mixing proportions, means, diagonal variances and mask probabilities.

    Shapes: ``pi`` (C,), ``W`` and ``phi`` (C, P1, P2, F), ``alpha``
    (C, P1, P2). ``patch_dims`` is (D1, D2).
    """
    pi: np.ndarray
    W: np.ndarray
    phi: np.ndarray
    alpha: np.ndarray
    patch_dims: tuple
    var_floor: float = VAR_FLOOR
    _prepared: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        W = np.asarray(self.W, dtype=np.float64)
        phi = np.maximum(np.asarray(self.phi, dtype=np.float64), self.var_floor)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        D = tuple(int(d) for d in self.patch_dims)
        if W.ndim != 4:
            raise ValueError("W must have shape (C, P1, P2, F)")
        C, P1, P2, _ = W.shape
        if phi.shape != W.shape or alpha.shape != W.shape[:3] or pi.shape != (C,):
            raise ValueError("inconsistent parameter shapes")
        if len(D) != 2 or P1 > D[0] or P2 > D[1]:
            raise ValueError("pattern must fit inside the patch")
        if abs(pi.sum() - 1.0) > 1e-9 or np.any(pi <= 0):
            raise ValueError("mixing proportions must be positive and sum to 1")
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise ValueError("mask parameters must lie in [0, 1]")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(phi))):
            raise ValueError("means and variances must be finite")
        for name, v in (("pi", pi), ("W", W), ("phi", phi), ("alpha", alpha)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "patch_dims", D)

    @property
    def num_classes(self):
        return self.W.shape[0]

    @property
    def pattern_dims(self):
        return self.W.shape[1:3]

    @property
    def feature_dim(self):
        return self.W.shape[3]

    def prepared(self):
        """Flattened parameter view used by the kernels (cached)."""
        if self._prepared is None:
            from .kernels import prepare
            object.__setattr__(self, "_prepared", prepare(self.W, self.phi, self.alpha))
        return self._prepared

    def replace(self, **kw):
        d = dict(pi=self.pi, W=self.W, phi=self.phi, alpha=self.alpha,
                 patch_dims=self.patch_dims, var_floor=self.var_floor)
        d.update(kw)
        return ModelParams(**d)

    def permuted(self, order):
        """Classes relabelled so that new class k is old class ``order[k]``."""
        order = np.asarray(order)
        return self.replace(pi=self.pi[order], W=self.W[order], phi=self.phi[order],
                            alpha=self.alpha[order])


@dataclass(frozen=True)
class LatentState:
    c: int
    x: tuple
    m: np.ndarray


def shift_index(i, x, patch_dims):
    """Patch cell covered by pattern cell ``i`` when the pattern sits at ``x``."""
    return ((i[0] + x[0]) % patch_dims[0], (i[1] + x[1]) % patch_dims[1])


def window_indices(pattern_dims, x, patch_dims):
    """(P1, P2) row and column index arrays of the shifted pattern window."""
    P1, P2 = pattern_dims
    r = (np.arange(P1) + x[0]) % patch_dims[0]
    c = (np.arange(P2) + x[1]) % patch_dims[1]
    return np.broadcast_to(r[:, None], (P1, P2)), np.broadcast_to(c[None, :], (P1, P2))


def log_prior(params, c, x=None):
    """log p(c) + log p(x); the position prior is uniform over the patch."""
    D1, D2 = params.patch_dims
    return float(np.log(params.pi[c]) - np.log(D1 * D2))


def gaussian_log_density(y, w, phi):
    """Diagonal Gaussian log density, summed over the trailing feature axis."""
    return -0.5 * (np.log(2.0 * np.pi * phi) + (y - w) ** 2 / phi).sum(axis=-1)


def cell_log_likes(params, bg, patch, c, x):
    """Foreground and background log densities of every pattern cell.

    Returns an array of shape (P1, P2, 2): ``[..., 0]`` is
    log N(y_(i+x); w_i, phi_i) and ``[..., 1]`` is log H_B(y_(i+x)).
    """
    Y = getattr(patch, "values", patch)
    rows, cols = window_indices(params.pattern_dims, x, params.patch_dims)
    y = Y[rows, cols]
    out = np.empty(params.pattern_dims + (2,))
    out[..., 0] = gaussian_log_density(y, params.W[c], params.phi[c])
    out[..., 1] = bg.cell_log_density(y)
    return out


def sample_patch(params, bg, rng, c=None, x=None, mask=None):
    """Draw one patch and its latents from the generative model.

    ``rng`` is a seed or a ``numpy.random.Generator``. Any of ``c``, ``x`` and
    ``mask`` may be fixed; the rest are drawn from their priors.
    """
    if bg is None:
        raise RuntimeError("background density has not been fitted")
    rng = np.random.default_rng(rng)
    D1, D2 = params.patch_dims
    P1, P2 = params.pattern_dims
    if c is None:
        c = int(rng.choice(params.num_classes, p=params.pi))
    if x is None:
        x = (int(rng.integers(D1)), int(rng.integers(D2)))
    if mask is None:
        mask = rng.random((P1, P2)) < params.alpha[c]
    mask = np.asarray(mask, dtype=bool)

    Y = bg.sample(rng, (D1, D2))
    fg = params.W[c] + np.sqrt(params.phi[c]) * rng.standard_normal(params.W[c].shape)
    rows, cols = window_indices((P1, P2), x, (D1, D2))
    Y[rows[mask], cols[mask]] = fg[mask]
    return Y, LatentState(c=c, x=tuple(x), m=mask)


def sample_dataset(params, bg, n, seed):
    """``n`` patches stacked as (n, D1, D2, F) plus their latent states."""
    rng = np.random.default_rng(seed)
    data = np.empty((n,) + tuple(params.patch_dims) + (params.feature_dim,))
    states = []
    for k in range(n):
        data[k], s = sample_patch(params, bg, rng)
        states.append(s)
    return data, states
