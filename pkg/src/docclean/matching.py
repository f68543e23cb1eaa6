"""MAP matches of a trained model against patches, and their quality."""
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .inference import SelectionConfig, patch_context, select

DEFAULT_GAMMA = 10.0


@dataclass(frozen=True)
class Match:
    """Best (class, position) for a patch.

    ``fully_visible`` means the pattern box starting at ``x`` lies inside the
    patch without cyclic wrap. ``quality`` is None until scored.
    """
    c: int
    x: tuple
    quality: object = None
    fully_visible: bool = False
    log_joint: float = float("nan")

    def with_quality(self, q):
        return replace(self, quality=float(q))


def _map_index(log_joint, cands):
    # highest score, then lower class, then row-major position
    order = np.lexsort((cands.x2, cands.x1, cands.c, -log_joint))
    return int(order[0])


def fully_visible(params, x):
    D1, D2 = params.patch_dims
    P1, P2 = params.pattern_dims
    return x[0] + P1 <= D1 and x[1] + P2 <= D2


def map_match(params, bg, patch, selection=None, counter=None):
    """MAP (class, position) over the truncated candidate set."""
    _, cands, log_joint = select(params, bg, patch, selection or SelectionConfig(), counter)
    k = _map_index(log_joint, cands)
    x = (int(cands.x1[k]), int(cands.x2[k]))
    return Match(c=int(cands.c[k]), x=x, fully_visible=fully_visible(params, x),
                 log_joint=float(log_joint[k]))


def quality_from_posterior(alpha, post, gamma=DEFAULT_GAMMA):
    """1 - weighted mean squared gap between mask parameters and posteriors.

    Weights are ``alpha ** gamma``; all-zero weights give 0.
    """
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    post = np.asarray(post, dtype=np.float64).ravel()
    w = alpha ** gamma
    total = w.sum()
    if total <= 0:
        return 0.0
    q = 1.0 - float((w * (alpha - post) ** 2).sum() / total)
    return min(1.0, max(0.0, q))


def match_quality(params, bg, patch, match, gamma=DEFAULT_GAMMA):
    ctx = patch_context(bg, patch)
    post = kernels.mask_posteriors(ctx.Y, ctx.logbg, params.prepared(),
                                   np.array([match.c]), np.array([match.x[0]]),
                                   np.array([match.x[1]]))[0]
    return quality_from_posterior(params.alpha[match.c], post, gamma)


def match_patch(params, bg, patch, selection=None, gamma=DEFAULT_GAMMA, counter=None):
    """MAP match with its quality filled in."""
    ctx = patch_context(bg, patch)
    m = map_match(params, bg, ctx, selection, counter)
    return m.with_quality(match_quality(params, bg, ctx, m, gamma))
