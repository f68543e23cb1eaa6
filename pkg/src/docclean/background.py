"""Per-dimension histogram density used for every non-pattern feature."""
from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 64
FLOOR_FACTOR = 1e-6


@dataclass(frozen=True)
class BackgroundDensity:
    """F independent 1-D histogram densities.

    ``edges`` has shape (F, B + 1), ``densities`` (F, B) and ``floor`` (F,).
    Queries outside ``[edges[f, 0], edges[f, -1]]`` get ``floor[f]``.
    """
    edges: np.ndarray
    densities: np.ndarray
    floor: np.ndarray

    @property
    def feature_dim(self):
        return self.edges.shape[0]

    @property
    def num_bins(self):
        return self.densities.shape[1]

    def log_density(self, y):
        """Per-dimension log densities for values of shape (..., F)."""
        y = np.asarray(y, dtype=np.float64)
        F, B = self.densities.shape
        out = np.empty(y.shape)
        with np.errstate(divide="ignore"):
            logd = np.log(self.densities)
        for f in range(F):
            v = y[..., f]
            e = self.edges[f]
            idx = np.searchsorted(e, v, side="right") - 1
            idx = np.where(v == e[-1], B - 1, idx)
            inside = (v >= e[0]) & (v <= e[-1])
            vals = logd[f][np.clip(idx, 0, B - 1)]
            # an empty bin inside the range is treated like an outlier
            vals = np.where(inside & (vals > -np.inf), vals, np.log(self.floor[f]))
            out[..., f] = vals
        return out

    def cell_log_density(self, values):
        """Sum over features of the log density; ``values`` is (..., F)."""
        return self.log_density(values).sum(axis=-1)

    def mode(self):
        """Centre of the highest-density bin, per dimension."""
        k = np.argmax(self.densities, axis=1)
        rows = np.arange(self.feature_dim)
        return 0.5 * (self.edges[rows, k] + self.edges[rows, k + 1])

    def sample(self, rng, shape):
        """Draw values of shape ``shape + (F,)`` by inverse-CDF sampling."""
        F, B = self.densities.shape
        out = np.empty(tuple(shape) + (F,))
        widths = np.diff(self.edges, axis=1)
        for f in range(F):
            mass = self.densities[f] * widths[f]
            cdf = np.cumsum(mass)
            cdf /= cdf[-1]
            u = rng.random(shape)
            k = np.minimum(np.searchsorted(cdf, u, side="right"), B - 1)
            out[..., f] = self.edges[f, k] + rng.random(shape) * widths[f, k]
        return out


def _stack_values(dataset):
    arrays = []
    for g in dataset:
        v = getattr(g, "values", g)
        v = np.asarray(v, dtype=np.float64)
        arrays.append(v.reshape(-1, v.shape[-1]))
    if not arrays:
        raise ValueError("cannot fit a background density to an empty dataset")
    return np.concatenate(arrays, axis=0)


def fit_background(dataset, num_bins=DEFAULT_BINS):
    """Histogram every feature dimension over all cells of all grids.

    ``dataset`` is a sequence of FeatureGrid objects or of (D1, D2, F) arrays,
    or a single (N, D1, D2, F) array. Foreground cells are included on purpose.
    """
    if num_bins < 2:
        raise ValueError("num_bins must be at least 2")
    if isinstance(dataset, np.ndarray):
        if dataset.size == 0:
            raise ValueError("cannot fit a background density to an empty dataset")
        values = dataset.reshape(-1, dataset.shape[-1]).astype(np.float64)
    else:
        values = _stack_values(list(dataset))
    if values.shape[0] == 0:
        raise ValueError("cannot fit a background density to an empty dataset")
    if not np.all(np.isfinite(values)):
        raise ValueError("feature values must be finite")

    F = values.shape[1]
    edges = np.empty((F, num_bins + 1))
    dens = np.empty((F, num_bins))
    floor = np.empty(F)
    for f in range(F):
        v = values[:, f]
        lo, hi = float(v.min()), float(v.max())
        if hi <= lo:
            lo, hi = lo - 0.5, lo + 0.5
        counts, e = np.histogram(v, bins=num_bins, range=(lo, hi))
        width = np.diff(e)
        edges[f] = e
        dens[f] = counts / (counts.sum() * width)
        floor[f] = FLOOR_FACTOR / (hi - lo)
    return BackgroundDensity(edges=edges, densities=dens, floor=floor)


def eval_background(bg, y):
    """Log density of one F-vector (or a stack of them) under ``bg``."""
    return bg.cell_log_density(y)
