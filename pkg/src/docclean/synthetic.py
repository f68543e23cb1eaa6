"""Known-parameter generators for colour-patch experiments."""
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .glyphs import glyph_set, scale_nearest, NAMES
from .model import ModelParams


@dataclass(frozen=True)
class GaussianMixtureBackground:
    """Independent per-dimension Gaussian mixtures (the true background).

    ``weights``, ``means`` and ``sds`` have shape (F, M).
    """
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    @property
    def feature_dim(self):
        return self.weights.shape[0]

    def sample(self, rng, shape):
        F, M = self.weights.shape
        out = np.empty(tuple(shape) + (F,))
        for f in range(F):
            k = rng.choice(M, size=shape, p=self.weights[f])
            out[..., f] = self.means[f, k] + self.sds[f, k] * rng.standard_normal(shape)
        return out

    def cdf(self, f, v):
        v = np.asarray(v, dtype=np.float64)[..., None]
        return (self.weights[f] * norm.cdf(v, self.means[f], self.sds[f])).sum(axis=-1)


def default_background(F=3, seed=0):
    """A multimodal background: three well-separated modes per channel."""
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.full(3, 5.0), size=F)
    means = np.sort(rng.uniform(0.05, 0.95, size=(F, 3)), axis=1)
    sds = rng.uniform(0.03, 0.08, size=(F, 3))
    return GaussianMixtureBackground(weights=w, means=means, sds=sds)


def generating_params(C=5, dims=(50, 50), F=3, seed=0, sd=0.05, a_on=0.95, a_off=0.02):
    """Ground-truth parameters with P = D: glyph-shaped masks, one colour each.

    Each class's mask is a built-in glyph scaled to 60% of the patch and
    centred. Means are a class colour plus a small per-cell offset; variances
    are ``sd ** 2`` everywhere.
    """
    rng = np.random.default_rng(seed)
    names = NAMES[:C] if C <= len(NAMES) else None
    if names is None:
        raise ValueError(f"at most {len(NAMES)} built-in glyphs")
    D1, D2 = dims
    g1, g2 = max(3, int(0.6 * D1)), max(3, int(0.6 * D2))
    r0, c0 = (D1 - g1) // 2, (D2 - g2) // 2
    A = np.full((C, D1, D2), a_off)
    W = np.empty((C, D1, D2, F))
    for c, g in enumerate(glyph_set(names)):
        m = scale_nearest(g, (g1, g2))
        A[c, r0:r0 + g1, c0:c0 + g2][m] = a_on
        colour = rng.uniform(0.25, 0.9, size=F)
        W[c] = np.clip(colour + 0.03 * rng.standard_normal((D1, D2, F)), 0.05, 1.0)
    return ModelParams(pi=np.full(C, 1.0 / C), W=W, phi=np.full(W.shape, sd ** 2),
                       alpha=A, patch_dims=dims)


def _shift_error(Wl, Wg, active):
    """Smallest mean relative error of ``Wl`` against ``Wg`` over cyclic shifts."""
    P1, P2 = Wg.shape[:2]
    ref = Wg[active]
    best = np.inf
    for s1 in range(P1):
        for s2 in range(P2):
            e = np.mean(np.abs(np.roll(Wl, (s1, s2), axis=(0, 1))[active] - ref) / np.abs(ref))
            best = min(best, e)
    return best


def recovery_error(learned, generating, active_threshold=0.5):
    """Mean relative error of learned means on the generator's active cells.

    Cells with generating alpha above ``active_threshold`` count. Each learned
    class is compared at its best cyclic shift, then classes are matched by
    the permutation with the lowest mean error. Returns
    ``(error, permutation)`` with ``permutation[b]`` the learned class
    assigned to generating class ``b``.
    """
    from itertools import permutations
    C = generating.num_classes
    if learned.num_classes != C:
        raise ValueError("learned and generating models differ in class count")
    E = np.array([[_shift_error(learned.W[a], generating.W[b],
                                generating.alpha[b] > active_threshold)
                   for b in range(C)] for a in range(C)])
    best = min(permutations(range(C)), key=lambda p: E[list(p), range(C)].mean())
    return float(E[list(best), range(C)].mean()), list(best)
