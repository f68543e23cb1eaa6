"""Exact and truncated posteriors over (class, position).

The exact posterior over (c, x) factorises from the mask posterior, so the
expensive part is scoring all C * D1 * D2 pairs. The truncated E-step scores
every pair cheaply on the ``lam`` most reliable pattern cells of each class,
keeps the top ``ceil(K * C * D1 * D2)`` pairs, and evaluates the full joint
only on those.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .model import cell_log_likes, log_prior

DEFAULT_LAMBDA = 200
DEFAULT_K = 0.02


@dataclass(frozen=True)
class SelectionConfig:
    """``lam`` reliable cells per class; ``K`` fraction of pairs kept.

    ``lam=None`` means min(200, P1 * P2); ``lam="all"`` means P1 * P2.
    """
    lam: object = None
    K: float = DEFAULT_K

    def __post_init__(self):
        if not 0 < self.K <= 1:
            raise ValueError("truncation fraction K must lie in (0, 1]")
        if self.lam not in (None, "all") and int(self.lam) < 1:
            raise ValueError("lambda must be at least 1")

    @classmethod
    def exact(cls):
        return cls(lam="all", K=1.0)

    def resolve_lambda(self, pattern_dims):
        n = pattern_dims[0] * pattern_dims[1]
        if self.lam == "all":
            return n
        lam = min(DEFAULT_LAMBDA, n) if self.lam is None else int(self.lam)
        if lam > n:
            raise ValueError(f"lambda={lam} exceeds the {n} pattern cells")
        return lam

    def is_exact(self, pattern_dims):
        return self.K == 1 and self.resolve_lambda(pattern_dims) == pattern_dims[0] * pattern_dims[1]


@dataclass
class EvalCounter:
    """Number of (c, x) pairs scored with the full pattern and with lambda cells."""
    joint: int = 0
    selection: int = 0
    patches: int = 0

    def add(self, other):
        self.joint += other.joint
        self.selection += other.selection
        self.patches += other.patches


@dataclass(frozen=True)
class CandidateSet:
    """Selected (c, x) pairs in tie-break order (score desc, class, row-major x)."""
    c: np.ndarray
    x1: np.ndarray
    x2: np.ndarray

    def __len__(self):
        return len(self.c)

    @property
    def entries(self):
        return list(zip(self.c.tolist(), zip(self.x1.tolist(), self.x2.tolist())))


@dataclass(frozen=True)
class PosteriorSummary:
    candidates: CandidateSet
    log_joint: np.ndarray      # log p(c, x, Y) per candidate
    q: np.ndarray              # normalised over the candidates
    mask_post: np.ndarray      # (K, P1, P2)
    log_evidence: float        # log of the candidate-restricted evidence

    @property
    def joint(self):
        return {e: float(v) for e, v in zip(self.candidates.entries, self.q)}


@dataclass
class PatchContext:
    """Per-patch quantities that do not depend on the model parameters."""
    Y: np.ndarray
    logbg: np.ndarray
    total_bg: float = field(init=False)

    def __post_init__(self):
        self.total_bg = float(self.logbg.sum())


def patch_context(bg, patch):
    if isinstance(patch, PatchContext):
        return patch
    Y = np.ascontiguousarray(getattr(patch, "values", patch), dtype=np.float64)
    return PatchContext(Y=Y, logbg=bg.cell_log_density(Y))


def capacity(K, num_pairs):
    n = math.ceil(round(K * num_pairs, 9))
    if n < 1:
        raise ValueError("K * C * D1 * D2 must be at least 1")
    return min(n, num_pairs)


def reliable_cells(params, lam):
    """Flat indices of the ``lam`` largest mask parameters per class.

    Ties are broken by row-major order.
    """
    a = params.alpha.reshape(params.num_classes, -1)
    order = np.argsort(-a, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :lam])


def _log_prior_vec(params):
    D1, D2 = params.patch_dims
    return np.log(params.pi) - np.log(D1 * D2)


# ---------------------------------------------------------------------------
# single-pair operations


def mask_posterior(params, bg, patch, c, x):
    """p(m_i = 1 | Y, c, x) for every pattern cell; shape (P1, P2)."""
    ll = cell_log_likes(params, bg, patch, c, x)
    alpha = params.alpha[c]
    with np.errstate(divide="ignore"):
        a = np.log(alpha) + ll[..., 0]
        b = np.log1p(-alpha) + ll[..., 1]
        post = np.exp(a - np.logaddexp(a, b))
    post = np.where(alpha == 0, 0.0, post)
    return np.where(alpha == 1, 1.0, post)


def joint_log_score(params, bg, patch, c, x):
    """log p(c, x, Y | params) for a single pair, evaluated cell by cell."""
    Y = getattr(patch, "values", patch)
    ll = cell_log_likes(params, bg, patch, c, x)
    alpha = params.alpha[c]
    with np.errstate(divide="ignore"):
        inside = np.logaddexp(np.log(alpha) + ll[..., 0], np.log1p(-alpha) + ll[..., 1]).sum()
    total_bg = bg.cell_log_density(Y).sum()
    outside = total_bg - ll[..., 1].sum()
    return float(inside + outside + log_prior(params, c, x))


# ---------------------------------------------------------------------------
# all-pairs operations


def joint_log_scores(params, bg, patch):
    """log p(c, x, Y) for all pairs; shape (C, D1, D2)."""
    ctx = patch_context(bg, patch)
    P = params.pattern_dims[0] * params.pattern_dims[1]
    sel = np.tile(np.arange(P), (params.num_classes, 1))
    s = kernels.delta_sums(ctx.Y, ctx.logbg, params.prepared(), sel)
    return s + ctx.total_bg + _log_prior_vec(params)[:, None, None]


def selection_scores(params, bg, patch, config):
    """Cheap ranking scores over all (c, x); shape (C, D1, D2).

    Only the ``lam`` most reliable cells of each class are compared against
    the foreground model; all remaining patch cells count as background. With
    ``lam = P1 * P2`` this equals :func:`joint_log_scores`.
    """
    ctx = patch_context(bg, patch)
    lam = config.resolve_lambda(params.pattern_dims)
    sel = reliable_cells(params, lam)
    s = kernels.delta_sums(ctx.Y, ctx.logbg, params.prepared(), sel)
    return s + ctx.total_bg + _log_prior_vec(params)[:, None, None]


def build_candidates(scores, config):
    """Top ``ceil(K * C * D1 * D2)`` pairs, ties to lower class then row-major x."""
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise ValueError("selection scores must be finite")
    C, D1, D2 = scores.shape
    n = capacity(config.K, scores.size)
    flat = np.argsort(-scores.ravel(), kind="stable")[:n]
    c, rem = np.divmod(flat, D1 * D2)
    x1, x2 = np.divmod(rem, D2)
    return CandidateSet(c=c, x1=x1, x2=x2)


def all_pairs(params):
    C = params.num_classes
    D1, D2 = params.patch_dims
    flat = np.arange(C * D1 * D2)
    c, rem = np.divmod(flat, D1 * D2)
    x1, x2 = np.divmod(rem, D2)
    return CandidateSet(c=c, x1=x1, x2=x2)


def candidate_log_joint(params, ctx, cands):
    s = kernels.candidate_sums(ctx.Y, ctx.logbg, params.prepared(), cands.c, cands.x1, cands.x2)
    return s + ctx.total_bg + _log_prior_vec(params)[cands.c]


def select(params, bg, patch, config, counter=None):
    """Candidate set and full joint log scores for one patch.

    In exact mode (K = 1 with all pattern cells) every pair is scored once
    with the full pattern and no selection pass runs.
    """
    ctx = patch_context(bg, patch)
    C = params.num_classes
    D1, D2 = params.patch_dims
    if config.is_exact(params.pattern_dims):
        cands = all_pairs(params)
        log_joint = joint_log_scores(params, bg, ctx).ravel()
        if counter is not None:
            counter.joint += C * D1 * D2
            counter.patches += 1
        return ctx, cands, log_joint
    scores = selection_scores(params, bg, ctx, config)
    cands = build_candidates(scores, config)
    log_joint = candidate_log_joint(params, ctx, cands)
    if counter is not None:
        counter.selection += C * D1 * D2
        counter.joint += len(cands)
        counter.patches += 1
    return ctx, cands, log_joint


def truncated_posterior(params, bg, patch, candidates=None, config=None):
    """Posterior over (c, x) renormalised on a candidate set, plus mask posteriors.

    Pass either an explicit ``candidates`` set or a ``config`` from which one
    is built.
    """
    ctx = patch_context(bg, patch)
    if candidates is None:
        ctx, candidates, log_joint = select(params, bg, ctx, config or SelectionConfig())
    else:
        if len(candidates) == 0:
            raise ValueError("candidate set is empty")
        log_joint = candidate_log_joint(params, ctx, candidates)
    logz = float(logsumexp(log_joint))
    q = np.exp(log_joint - logz)
    mp = kernels.mask_posteriors(ctx.Y, ctx.logbg, params.prepared(),
                                 candidates.c, candidates.x1, candidates.x2)
    return PosteriorSummary(
        candidates=candidates,
        log_joint=log_joint,
        q=q,
        mask_post=mp.reshape((len(candidates),) + tuple(params.pattern_dims)),
        log_evidence=logz,
    )


def log_evidence(params, bg, patch, config, counter=None):
    """log of the candidate-restricted evidence of one patch."""
    _, _, log_joint = select(params, bg, patch, config, counter)
    return float(logsumexp(log_joint))


def free_energy(dataset, params, bg, config, counter=None):
    """Sum over patches of the truncated log evidence.

    With q equal to the joint renormalised on each candidate set, the bound
    collapses to this sum; for K = 1 it is the exact log-likelihood.
    """
    return float(sum(log_evidence(params, bg, p, config, counter) for p in dataset))
