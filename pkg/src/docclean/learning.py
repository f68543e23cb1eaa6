"""EM training: initialisation, truncated E-step, closed-form M-step, restarts."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .inference import EvalCounter, PatchContext, SelectionConfig, select
from .model import VAR_FLOOR, ModelParams

log = logging.getLogger(__name__)

RESP_FLOOR = 1e-12
DEAD_CLASS_FRACTION = 1e-6
TAU_MASK = 0.5
TAU_PI = 0.25


@dataclass(frozen=True)
class LearnConfig:
    num_classes: int
    pattern_dims: tuple
    max_iters: int = 100
    restarts: int = 3
    rng_seed: int = 0
    convergence: float = 1e-5
    patience: int = 3
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    init: str = "segments"   # "segments" (document) or "cube" (colour data)
    var_floor: float = VAR_FLOOR
    rel_var_floor: float = 1e-2   # variance floor as a fraction of the data variance
    revive: str = "split"         # "split" or "segment"
    init_phi: str = "std"         # "std" or "var"
    starve_fraction: float = 0.1  # during warmup, classes below this share of N/C are revived
    warmup: int = 10
    split_merge: int = 0          # rounds of remove-and-split moves after EM converges
    snapshot_every: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.convergence <= 0:
            raise ValueError("convergence threshold must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.init not in ("segments", "cube"):
            raise ValueError(f"unknown initialisation {self.init!r}")
        if self.revive not in ("split", "segment"):
            raise ValueError(f"unknown revival rule {self.revive!r}")
        if self.init_phi not in ("std", "var"):
            raise ValueError(f"unknown variance initialisation {self.init_phi!r}")
        if self.rel_var_floor < 0 or self.var_floor <= 0:
            raise ValueError("variance floors must be non-negative (absolute floor positive)")
        if not 0 <= self.starve_fraction < 1:
            raise ValueError("starve_fraction must lie in [0, 1)")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if self.split_merge < 0:
            raise ValueError("split_merge must be non-negative")


@dataclass(frozen=True)
class ClassReport:
    pi: np.ndarray
    mask_strength: np.ndarray
    is_character: np.ndarray

    @property
    def character_classes(self):
        return [int(c) for c in np.flatnonzero(self.is_character)]

    @property
    def num_characters(self):
        return int(self.is_character.sum())


@dataclass
class EMResult:
    params: ModelParams
    trace: list
    converged: bool
    seed: int = 0

    @property
    def free_energy(self):
        steps = [r for r in self.trace if "move" not in r]
        return steps[-1]["free_energy"] if steps else -np.inf


def as_array(dataset):
    """Stack a dataset of FeatureGrids or arrays into (N, D1, D2, F)."""
    if isinstance(dataset, np.ndarray):
        return np.ascontiguousarray(dataset, dtype=np.float64)
    return np.stack([np.asarray(getattr(g, "values", g), dtype=np.float64) for g in dataset])


def _class_rngs(seed, C):
    children = np.random.SeedSequence(seed).spawn(C + 1)
    return np.random.default_rng(children[-1]), [np.random.default_rng(s) for s in children[:C]]


def _segment(Y, rng, P):
    D1, D2 = Y.shape[:2]
    r = int(rng.integers(D1 - P[0] + 1))
    c = int(rng.integers(D2 - P[1] + 1))
    return Y[r:r + P[0], c:c + P[1]].copy()


def initialize(dataset, config, bg=None):
    """Initial parameters, deterministic in ``config.rng_seed``.

    Means come from random pattern-sized segments of distinct patches
    (``init="segments"``) or uniform draws over the observed feature range
    (``init="cube"``). Variances start at the per-dimension data standard
    deviation (``init_phi="std"``) or variance (``"var"``), mask parameters
    uniform in [0, 1], mixing proportions uniform.
    """
    data = as_array(dataset)
    N, D1, D2, F = data.shape
    C = config.num_classes
    P = tuple(config.pattern_dims)
    if N < C:
        raise ValueError(f"dataset has {N} patches, fewer than {C} classes")
    shared, per_class = _class_rngs(config.rng_seed, C)

    flat = data.reshape(-1, F)
    var = np.maximum(flat.var(axis=0), config.var_floor)
    if config.init_phi == "std":
        var = np.sqrt(var)
    lo, hi = flat.min(axis=0), flat.max(axis=0)

    W = np.empty((C,) + P + (F,))
    A = np.empty((C,) + P)
    picks = shared.choice(N, size=C, replace=False)
    for c, rng in enumerate(per_class):
        if config.init == "segments":
            W[c] = _segment(data[picks[c]], rng, P)
        else:
            W[c] = lo + (hi - lo) * rng.random(P + (F,))
        A[c] = rng.random(P)
    phi = np.broadcast_to(var, W.shape).copy()
    return ModelParams(pi=np.full(C, 1.0 / C), W=W, phi=phi, alpha=A,
                       patch_dims=(D1, D2), var_floor=config.var_floor)


# ---------------------------------------------------------------------------
# E-step


def new_stats(params):
    C = params.num_classes
    P = params.pattern_dims[0] * params.pattern_dims[1]
    F = params.feature_dim
    return (np.zeros(C), np.zeros((C, P)), np.zeros((C, P, F)), np.zeros((C, P, F)))


def contexts(dataset, bg):
    data = as_array(dataset)
    return [PatchContext(Y=Y, logbg=bg.cell_log_density(Y)) for Y in data]


def e_step(params, bg, ctxs, selection, counter=None):
    """Truncated E-step over all patches, fused with statistic accumulation.

    Returns the sufficient statistics and the free energy of ``params``.
    Patches are reduced in index order, so the result is reproducible.
    """
    stats = new_stats(params)
    prep = params.prepared()
    fe = 0.0
    for ctx in ctxs:
        ctx, cands, log_joint = select(params, bg, ctx, selection, counter)
        logz = float(logsumexp(log_joint))
        fe += logz
        q = np.exp(log_joint - logz)
        kernels.accumulate(ctx.Y, ctx.logbg, prep, cands.c, cands.x1, cands.x2, q, stats)
    return stats, fe


def stats_from_posteriors(params, dataset, posteriors):
    """Sufficient statistics from explicit per-patch PosteriorSummary objects."""
    data = as_array(dataset)
    n_c, s_a, s_w, s_w2 = new_stats(params)
    D1, D2 = params.patch_dims
    P1, P2 = params.pattern_dims
    i1, i2 = np.divmod(np.arange(P1 * P2), P2)
    for Y, post in zip(data, posteriors):
        cs = post.candidates
        for k in range(len(cs)):
            c = cs.c[k]
            rows = (i1 + cs.x1[k]) % D1
            cols = (i2 + cs.x2[k]) % D2
            y = Y[rows, cols]
            r = post.q[k] * post.mask_post[k].ravel()
            n_c[c] += post.q[k]
            s_a[c] += r
            s_w[c] += r[:, None] * y
            s_w2[c] += r[:, None] * y * y
    return n_c, s_a, s_w, s_w2


# ---------------------------------------------------------------------------
# M-step


def params_from_stats(params, stats, N, data=None, rng=None, floor=None, revive="segment",
                      min_mass=None):
    """Closed-form parameter update from accumulated statistics.

    Classes whose responsibility mass falls below ``min_mass`` (default
    ``1e-6 * N``) are revived, which needs ``data`` and ``rng``. ``"split"``
    copies the largest class with small noise on the means and halves its
    mixing proportion between the two; ``"segment"`` restarts the class from a
    random patch segment.
    """
    n_c, s_a, s_w, s_w2 = stats
    C, P1, P2, F = params.W.shape
    if floor is None:
        floor = params.var_floor

    denom = np.maximum(s_a, RESP_FLOOR)[..., None]
    W = s_w / denom
    phi = np.maximum(s_w2 / denom - W * W, floor)
    alpha = np.clip(s_a / np.maximum(n_c, RESP_FLOOR)[:, None], 0.0, 1.0)
    pi = n_c / N

    if min_mass is None:
        min_mass = DEAD_CLASS_FRACTION * N
    dead = np.flatnonzero(n_c < min_mass)
    if len(dead) and data is not None and revive == "split":
        for c in dead:
            d = int(np.argmax(pi))
            log.info("splitting class %d into dead class %d", d, c)
            W[c] = W[d] + 0.1 * np.sqrt(phi[d]) * rng.standard_normal(W[d].shape)
            phi[c] = phi[d]
            alpha[c] = alpha[d]
            pi[c] = pi[d] = 0.5 * pi[d]
    elif len(dead) and data is not None:
        var = np.maximum(data.reshape(-1, F).var(axis=0), floor)
        for c in dead:
            log.info("re-initialising dead class %d", c)
            Y = data[int(rng.integers(len(data)))]
            W[c] = _segment(Y, rng, (P1, P2)).reshape(P1 * P2, F)
            phi[c] = var
            alpha[c] = rng.random(P1 * P2)
            pi[c] = 1.0 / N
    pi = np.maximum(pi, np.finfo(float).tiny)
    pi = pi / pi.sum()
    return params.replace(
        pi=pi,
        W=W.reshape(C, P1, P2, F),
        phi=phi.reshape(C, P1, P2, F),
        alpha=alpha.reshape(C, P1, P2),
    ), [int(c) for c in dead]


def m_step(dataset, posteriors, params):
    """Parameter update from explicit per-patch posteriors (literal API)."""
    data = as_array(dataset)
    stats = stats_from_posteriors(params, data, posteriors)
    new, _ = params_from_stats(params, stats, len(data))
    return new


# ---------------------------------------------------------------------------
# EM driver


def _snapshot(params):
    return {
        "pi": params.pi.tolist(),
        "mask_strength": params.alpha.reshape(params.num_classes, -1).mean(axis=1).tolist(),
    }


def run_em(dataset, config, bg, init=None, callback=None):
    """Alternate truncated E-steps and M-steps.

    Stops after ``max_iters`` E/M pairs or once the relative free-energy change
    stays below ``convergence`` for ``patience`` consecutive iterations.
    """
    data = as_array(dataset)
    params = init if init is not None else initialize(data, config, bg)
    ctxs = contexts(data, bg)
    N = len(data)
    floor = np.maximum(config.var_floor, config.rel_var_floor * data.reshape(-1, data.shape[-1]).var(axis=0))
    trace = []
    calm = 0
    converged = False
    prev = None
    for it in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        counter = EvalCounter()
        stats, fe = e_step(params, bg, ctxs, config.selection, counter)
        rng = np.random.default_rng([config.rng_seed, it])
        min_mass = DEAD_CLASS_FRACTION * N
        if it <= config.warmup:
            min_mass = max(min_mass, config.starve_fraction * N / config.num_classes)
        params, dead = params_from_stats(params, stats, N, data, rng, floor, config.revive, min_mass)
        rec = {
            "iteration": it,
            "free_energy": fe,
            "joint_evals": counter.joint,
            "selection_evals": counter.selection,
            "dead_classes": dead,
            "seconds": time.perf_counter() - t0,
        }
        if config.snapshot_every and it % config.snapshot_every == 0:
            rec["snapshot"] = _snapshot(params)
        trace.append(rec)
        log.debug("iteration %d: free energy %.6f", it, fe)
        if callback is not None:
            callback(rec)
        if prev is not None:
            rel = abs(fe - prev) / max(abs(prev), 1e-300)
            calm = calm + 1 if rel < config.convergence else 0
            if calm >= config.patience:
                converged = True
                break
        prev = fe
    result = EMResult(params=params, trace=trace, converged=converged, seed=config.rng_seed)
    if config.split_merge:
        result = refine(data, result, config, bg, ctxs, callback=callback)
    return result


def without_class(params, c):
    keep = np.arange(params.num_classes) != c
    pi = params.pi[keep]
    return params.replace(pi=pi / pi.sum(), W=params.W[keep], phi=params.phi[keep],
                          alpha=params.alpha[keep])


def split_into(params, target, source, rng):
    """Overwrite class ``target`` with a noisy copy of ``source``; they share its weight."""
    W, phi, alpha, pi = (a.copy() for a in (params.W, params.phi, params.alpha, params.pi))
    W[target] = W[source] + 0.1 * np.sqrt(phi[source]) * rng.standard_normal(W[source].shape)
    phi[target] = phi[source]
    alpha[target] = alpha[source]
    pi[target] = pi[source] = 0.5 * pi[source]
    pi = pi / pi.sum()
    return params.replace(pi=pi, W=W, phi=phi, alpha=alpha)


def refine(dataset, result, config, bg, ctxs=None, candidates=2, callback=None):
    """Remove-and-split search around a converged EM solution.

    A move drops the class whose removal costs the least free energy and
    re-uses its slot for a split of the heaviest remaining class, then runs
    EM again. The move is kept only if the free energy rises. This escapes
    optima where two patterns share one class while another pattern is
    spread over two. Up to ``config.split_merge`` moves are accepted; each
    round tries the ``candidates`` cheapest removals.
    """
    data = as_array(dataset)
    ctxs = ctxs if ctxs is not None else contexts(data, bg)
    inner = LearnConfig(**{**config.__dict__, "split_merge": 0, "warmup": 0})
    best = result
    trace = list(result.trace)
    for move in range(config.split_merge):
        params = best.params
        C = params.num_classes
        if C < 2:
            break
        loss = [best.free_energy - e_step(without_class(params, c), bg, ctxs, config.selection)[1]
                for c in range(C)]
        accepted = False
        for c in np.argsort(loss, kind="stable")[:candidates]:
            c = int(c)
            others = np.delete(np.arange(C), c)
            source = int(others[np.argmax(params.pi[others])])
            rng = np.random.default_rng([config.rng_seed, 1_000_003, move, c])
            trial = run_em(data, inner, bg, init=split_into(params, c, source, rng),
                           callback=callback)
            gain = trial.free_energy - best.free_energy
            log.info("move %d: drop class %d, split class %d, free energy change %.3f",
                     move + 1, c, source, gain)
            rec = {"move": move + 1, "removed": c, "split": source,
                   "free_energy": trial.free_energy, "accepted": bool(gain > 0)}
            trace.append(rec)
            if callback is not None:
                callback(rec)
            if gain > 0:
                trace.extend(trial.trace)
                best = EMResult(params=trial.params, trace=trace, converged=trial.converged,
                                seed=result.seed)
                accepted = True
                break
        if not accepted:
            break
    if best is result:
        result.trace = trace
        return result
    best.trace = trace
    return best


def classify_classes(params, tau_mask=TAU_MASK, tau_pi=TAU_PI):
    """Flag classes that look like characters.

    A class counts as a character if its mean mask parameter reaches
    ``tau_mask`` times the median over classes and its mixing proportion
    reaches ``tau_pi / C``.
    """
    C = params.num_classes
    strength = params.alpha.reshape(C, -1).mean(axis=1)
    med = np.median(strength)
    flags = (strength >= tau_mask * med) & (params.pi >= tau_pi / C)
    return ClassReport(pi=params.pi.copy(), mask_strength=strength, is_character=flags)


def select_best(results, **thresholds):
    """Index of the run with most character classes, then highest free energy."""
    keys = [(classify_classes(r.params, **thresholds).num_characters, r.free_energy)
            for r in results]
    return max(range(len(results)), key=lambda k: (keys[k][0], keys[k][1], -k))


@dataclass
class RestartResult:
    best: EMResult
    runs: list
    best_index: int

    @property
    def params(self):
        return self.best.params


def multi_restart(dataset, config, bg, inits=None, callback=None):
    """Run EM with seeds ``rng_seed + r`` and keep the most character-rich result."""
    data = as_array(dataset)
    runs = []
    for r in range(config.restarts):
        cfg = LearnConfig(**{**config.__dict__, "rng_seed": config.rng_seed + r})
        init = inits[r] if inits is not None else None
        log.info("restart %d/%d (seed %d)", r + 1, config.restarts, cfg.rng_seed)
        runs.append(run_em(data, cfg, bg, init=init, callback=callback))
    k = select_best(runs)
    return RestartResult(best=runs[k], runs=runs, best_index=k)
