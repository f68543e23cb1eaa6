"""Document reconstruction by iterated match, paint and blank passes.

Every patch of the working page is matched against the model. Accepted
matches paint their class exemplar onto an initially blank reconstruction
and are blanked out of the working page, which can expose further matches
in the next pass. The loop stops when a pass accepts nothing.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .features import PageRaster, extract_patches
from .inference import SelectionConfig
from .learning import classify_classes
from .matching import DEFAULT_GAMMA, match_patch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CleaningConfig:
    q_threshold: float = 0.5
    max_passes: int = 10
    gamma: float = DEFAULT_GAMMA
    max_overlap: float = 0.3
    mask_threshold: float = 0.5
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    classes: object = None       # character classes; None means classify_classes
    fill: object = None          # blank value per channel; None means the page mode
    blank: bool = True

    def __post_init__(self):
        if self.max_passes < 1:
            raise ValueError("max_passes must be at least 1")
        if not 0 <= self.q_threshold <= 1:
            raise ValueError("q_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class Exemplar:
    c: int
    bitmap: np.ndarray     # (h, w, channels) cut from the original page
    cell_box: tuple        # (i0, j0, i1, j1) pattern cells, end exclusive
    patch_id: int
    quality: float


@dataclass(frozen=True)
class AcceptedMatch:
    c: int
    position: tuple        # page pixel of pattern cell (0, 0)
    box: tuple             # (r0, c0, r1, c1) page pixels, end exclusive
    quality: float
    pass_index: int
    patch_id: int

    def to_dict(self):
        return {"class": self.c, "position": list(self.position), "box": list(self.box),
                "quality": self.quality, "pass": self.pass_index, "patch": self.patch_id}


@dataclass
class CleaningState:
    working_page: np.ndarray
    reconstruction: np.ndarray
    accepted: list = field(default_factory=list)
    pass_count: int = 0


@dataclass
class CleaningReport:
    accepted: list
    passes: int
    per_pass: list
    exemplars: dict
    missing_classes: list
    fill: list

    def counts(self):
        out = {}
        for a in self.accepted:
            out[a.c] = out.get(a.c, 0) + 1
        return dict(sorted(out.items()))

    def to_dict(self):
        return {
            "passes": self.passes,
            "accepted_per_pass": self.per_pass,
            "counts": {str(k): v for k, v in self.counts().items()},
            "exemplars": {str(c): {"patch": e.patch_id, "quality": e.quality,
                                   "cell_box": list(e.cell_box)}
                          for c, e in sorted(self.exemplars.items())},
            "missing_classes": self.missing_classes,
            "fill": self.fill,
            "accepted": [a.to_dict() for a in self.accepted],
        }


def mask_box(params, c, threshold=0.5):
    """Tight (i0, j0, i1, j1) box around pattern cells with alpha >= threshold."""
    on = params.alpha[c] >= threshold
    if not on.any():
        return None
    rows = np.flatnonzero(on.any(axis=1))
    cols = np.flatnonzero(on.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def pixel_box(patch, x, cell_box, cell_stride):
    """Page-pixel box of pattern cells ``cell_box`` placed at grid position ``x``."""
    s = cell_stride
    r0 = patch.origin[0] + (x[0] + cell_box[0]) * s
    c0 = patch.origin[1] + (x[1] + cell_box[1]) * s
    r1 = patch.origin[0] + (x[0] + cell_box[2]) * s
    c1 = patch.origin[1] + (x[1] + cell_box[3]) * s
    return r0, c0, r1, c1


def page_mode(page, bins=256):
    """Most frequent value per channel (histogram bin centre)."""
    out = []
    for ch in range(page.channels):
        h, edges = np.histogram(page.data[:, :, ch], bins=bins, range=(0.0, 1.0))
        k = int(np.argmax(h))
        out.append(0.5 * (edges[k] + edges[k + 1]))
    return np.array(out)


def _overlap(a, b):
    h = min(a[2], b[2]) - max(a[0], b[0])
    w = min(a[3], b[3]) - max(a[1], b[1])
    return max(h, 0) * max(w, 0)


def _area(b):
    return max(b[2] - b[0], 0) * max(b[3] - b[1], 0)


def _clip(box, shape):
    return (max(box[0], 0), max(box[1], 0), min(box[2], shape[0]), min(box[3], shape[1]))


def match_patches(params, bg, patches, features, config, only=None, cache=None):
    """Matches for every patch; entries in ``cache`` are reused unless listed in ``only``."""
    out = list(cache) if cache is not None else [None] * len(patches)
    todo = range(len(patches)) if only is None else only
    for k in todo:
        grid = features.transform(patches[k])
        out[k] = match_patch(params, bg, grid, config.selection, config.gamma)
    return out


def best_exemplars(page, matches, params, patches, features, classes, mask_threshold=0.5):
    """Highest-quality fully visible match per class, cut from ``page``.

    Returns ``(exemplars, missing)``; ties in quality go to the lower patch id.
    """
    ex, missing = {}, []
    for c in classes:
        box = mask_box(params, c, mask_threshold)
        best = None
        for k, m in enumerate(matches):
            if m.c != c or not m.fully_visible or box is None:
                continue
            if best is None or m.quality > matches[best].quality:
                best = k
        if best is None:
            missing.append(int(c))
            continue
        m = matches[best]
        r0, c0, r1, c1 = _clip(pixel_box(patches[best], m.x, box, features.cell_stride),
                               page.data.shape)
        ex[int(c)] = Exemplar(c=int(c), bitmap=page.data[r0:r1, c0:c1].copy(), cell_box=box,
                              patch_id=best, quality=float(m.quality))
    return ex, missing


def clean_pass(state, params, patches, matches, exemplars, features, config, pass_index):
    """Accept, paint and blank one pass of matches.

    Returns the accepted matches and the page boxes that were blanked.
    """
    shape = state.working_page.shape
    cands = []
    for k, m in enumerate(matches):
        if m.c not in exemplars or not m.fully_visible or m.quality < config.q_threshold:
            continue
        ex = exemplars[m.c]
        box = pixel_box(patches[k], m.x, ex.cell_box, features.cell_stride)
        if _clip(box, shape) != box:
            continue
        cands.append((-m.quality, k, m, box))
    cands.sort(key=lambda t: (t[0], t[1]))
    taken = [a.box for a in state.accepted]
    new = []
    for negq, k, m, box in cands:
        area = _area(box)
        if any(_overlap(box, b) > config.max_overlap * area for b in taken):
            continue
        taken.append(box)
        pos = (box[0] - exemplars[m.c].cell_box[0] * features.cell_stride,
               box[1] - exemplars[m.c].cell_box[1] * features.cell_stride)
        new.append(AcceptedMatch(c=m.c, position=pos, box=box, quality=-negq,
                                 pass_index=pass_index, patch_id=k))
    return new


def _patches_touching(patches, boxes, margin):
    hit = []
    for k, p in enumerate(patches):
        r0, c0 = p.origin
        pb = (r0 - margin, c0 - margin, r0 + p.height + margin, c0 + p.width + margin)
        if any(_overlap(pb, b) > 0 for b in boxes):
            hit.append(k)
    return hit


def clean_document(page, params, bg, features, config=None):
    """Reconstruct ``page`` from the exemplars of the model's character classes.

    Returns ``(reconstruction, report)``. Features are recomputed each pass
    for the patches whose pixels changed (within the filter radius).
    Exemplars are fixed after the first matching round, except that a class
    without one takes the best fully visible match of a later round.
    """
    config = config or CleaningConfig()
    classes = config.classes
    if classes is None:
        classes = classify_classes(params).character_classes
    fill = np.broadcast_to(np.asarray(page_mode(page) if config.fill is None else config.fill,
                                      dtype=np.float64), (page.channels,)).copy()
    state = CleaningState(working_page=page.data.copy(),
                          reconstruction=np.broadcast_to(fill, page.data.shape).copy())
    margin = features.gabor.radius if features.kind == "gabor" else 0

    def cut():
        return extract_patches(PageRaster(state.working_page, page.origin),
                               features.patch_size, features.stride)

    patches = cut()
    matches = match_patches(params, bg, patches, features, config)
    exemplars, missing = best_exemplars(page, matches, params, patches, features, classes,
                                        config.mask_threshold)
    per_pass = []
    for p in range(1, config.max_passes + 1):
        new = clean_pass(state, params, patches, matches, exemplars, features, config, p)
        state.pass_count = p
        per_pass.append(len(new))
        log.info("pass %d: %d accepted", p, len(new))
        if not new:
            break
        for a in new:
            r0, c0, r1, c1 = a.box
            bm = exemplars[a.c].bitmap
            h, w = min(bm.shape[0], r1 - r0), min(bm.shape[1], c1 - c0)
            region = state.reconstruction[r0:r0 + h, c0:c0 + w]
            np.minimum(region, bm[:h, :w], out=region)
            if config.blank:
                state.working_page[r0:r1, c0:c1] = fill
        state.accepted.extend(new)
        if p == config.max_passes:
            break
        if config.blank:
            dirty = _patches_touching(patches, [a.box for a in new], margin)
            patches = cut()
            matches = match_patches(params, bg, patches, features, config, only=dirty,
                                    cache=matches)
            if missing:
                # classes hidden behind others may become visible once those are blanked
                late, missing = best_exemplars(page, matches, params, patches, features, missing,
                                               config.mask_threshold)
                exemplars.update(late)
    if missing:
        log.warning("no fully visible match for classes %s", missing)
    report = CleaningReport(accepted=state.accepted, passes=state.pass_count, per_pass=per_pass,
                            exemplars=exemplars, missing_classes=missing, fill=fill.tolist())
    return PageRaster(np.clip(state.reconstruction, 0.0, 1.0), page.origin), report
