"""Synthetic corrupted document pages with exact ground truth, and scoring."""
import configparser
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .features import PageRaster
from .glyphs import glyph, NAMES


@dataclass(frozen=True)
class StrokeSpec:
    """Anti-aliased line segments in ink colour."""
    count: int = 0
    length: tuple = (20.0, 60.0)
    thickness: tuple = (1.0, 2.0)
    orientation: tuple = (0.0, 180.0)   # degrees


@dataclass(frozen=True)
class SpotSpec:
    """Soft grey discs."""
    count: int = 0
    radius: tuple = (2.0, 6.0)
    intensity: tuple = (0.3, 0.7)      # grey level at the spot centre


@dataclass(frozen=True)
class DocumentSpec:
    """Everything needed to render one page; rendering is seeded.

    ``glyphs`` holds built-in glyph names or boolean bitmaps. Instances are
    placed on a grid with ``pitch`` pixels between slot corners; with
    ``placement="jittered"`` each instance moves by up to ``jitter`` pixels.
    """
    page_dims: tuple = (680, 680)
    glyphs: tuple = ("a", "b", "e", "s", "y")
    instances_per_glyph: int = 250
    placement: str = "grid"
    pitch: tuple = (18, 18)
    jitter: int = 2
    margin: int = 12
    glyph_scale: int = 1
    ink: float = 0.1
    paper: float = 0.95
    noise: float = 0.02
    strokes: StrokeSpec = field(default_factory=StrokeSpec)
    spots: SpotSpec = field(default_factory=SpotSpec)
    rng_seed: int = 0

    def __post_init__(self):
        if self.placement not in ("grid", "jittered"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.instances_per_glyph < 0 or self.strokes.count < 0 or self.spots.count < 0:
            raise ValueError("counts must be non-negative")
        if not (0 <= self.ink <= 1 and 0 <= self.paper <= 1):
            raise ValueError("ink and paper levels must lie in [0, 1]")

    def bitmaps(self):
        out = []
        for g in self.glyphs:
            b = glyph(g) if isinstance(g, str) else np.asarray(g, dtype=bool)
            k = int(self.glyph_scale)
            out.append(np.kron(b, np.ones((k, k), dtype=bool)) if k > 1 else b)
        return out


@dataclass(frozen=True)
class GlyphInstance:
    glyph_id: int
    position: tuple     # top-left pixel of the glyph bitmap
    box: tuple          # (r0, c0, r1, c1) tight ink box, end exclusive

    @property
    def center(self):
        return ((self.box[0] + self.box[2] - 1) / 2.0, (self.box[1] + self.box[3] - 1) / 2.0)


@dataclass(frozen=True)
class GroundTruth:
    instances: list
    dirt: list          # one dict per stroke / spot
    ink_area: int       # glyph ink pixels
    dirt_area: int      # pixels darkened by dirt

    def to_dict(self):
        return {
            "instances": [{"glyph": g.glyph_id, "position": list(g.position), "box": list(g.box)}
                          for g in self.instances],
            "dirt": self.dirt,
            "ink_area": self.ink_area,
            "dirt_area": self.dirt_area,
        }

    @classmethod
    def from_dict(cls, d):
        inst = [GlyphInstance(int(g["glyph"]), tuple(g["position"]), tuple(g["box"]))
                for g in d["instances"]]
        return cls(instances=inst, dirt=list(d.get("dirt", [])),
                   ink_area=int(d.get("ink_area", 0)), dirt_area=int(d.get("dirt_area", 0)))


def _ink_box(bitmap):
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _slots(spec, shape):
    H, W = spec.page_dims
    h, w = shape
    m, j = spec.margin, spec.jitter if spec.placement == "jittered" else 0
    rows = range(m + j, H - m - h - j + 1, spec.pitch[0])
    cols = range(m + j, W - m - w - j + 1, spec.pitch[1])
    return [(r, c) for r in rows for c in cols]


def _segment_coverage(shape, p0, p1, thickness):
    """Anti-aliased coverage in [0, 1] of a thick segment, plus its bounding slice."""
    H, W = shape
    half = thickness / 2.0 + 1.0
    r0 = max(0, int(math.floor(min(p0[0], p1[0]) - half)))
    r1 = min(H, int(math.ceil(max(p0[0], p1[0]) + half)) + 1)
    c0 = max(0, int(math.floor(min(p0[1], p1[1]) - half)))
    c1 = min(W, int(math.ceil(max(p0[1], p1[1]) + half)) + 1)
    if r0 >= r1 or c0 >= c1:
        return None, None
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    d = np.array(p1, dtype=np.float64) - np.array(p0, dtype=np.float64)
    L2 = float(d @ d)
    t = np.zeros_like(yy) if L2 == 0 else np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0, 1)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    cov = np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
    return cov, (slice(r0, r1), slice(c0, c1))


def render_document(spec):
    """Render a page and its ground truth.

    Glyphs are drawn first, then strokes and spots on top, then Gaussian
    pixel noise; the result is clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.rng_seed)
    H, W = spec.page_dims
    bitmaps = spec.bitmaps()
    n_total = spec.instances_per_glyph * len(bitmaps)
    page = np.full((H, W), spec.paper)
    instances = []
    ink_mask = np.zeros((H, W), dtype=bool)
    if n_total:
        shape = (max(b.shape[0] for b in bitmaps), max(b.shape[1] for b in bitmaps))
        slots = _slots(spec, shape)
        if len(slots) < n_total:
            raise ValueError(f"page fits {len(slots)} glyphs, {n_total} requested")
        ids = np.repeat(np.arange(len(bitmaps)), spec.instances_per_glyph)
        rng.shuffle(ids)
        picks = np.sort(rng.choice(len(slots), size=n_total, replace=False))
        for gid, s in zip(ids, picks):
            r, c = slots[s]
            if spec.placement == "jittered":
                r += int(rng.integers(-spec.jitter, spec.jitter + 1))
                c += int(rng.integers(-spec.jitter, spec.jitter + 1))
            b = bitmaps[gid]
            page[r:r + b.shape[0], c:c + b.shape[1]][b] = spec.ink
            ink_mask[r:r + b.shape[0], c:c + b.shape[1]] |= b
            br = _ink_box(b)
            instances.append(GlyphInstance(int(gid), (r, c), (r + br[0], c + br[1], r + br[2], c + br[3])))

    dirt_mask = np.zeros((H, W), dtype=bool)
    dirt = []
    st = spec.strokes
    for _ in range(st.count):
        p0 = (rng.uniform(0, H), rng.uniform(0, W))
        L = rng.uniform(*st.length)
        th = math.radians(rng.uniform(*st.orientation))
        p1 = (p0[0] - L * math.sin(th), p0[1] + L * math.cos(th))
        thick = rng.uniform(*st.thickness)
        cov, sl = _segment_coverage((H, W), p0, p1, thick)
        if cov is None:
            continue
        page[sl] = np.minimum(page[sl], spec.paper + cov * (spec.ink - spec.paper))
        dirt_mask[sl] |= cov > 0.5
        dirt.append({"kind": "stroke", "start": list(p0), "end": list(p1), "thickness": thick})
    sp = spec.spots
    for _ in range(sp.count):
        cr, cc = rng.uniform(0, H), rng.uniform(0, W)
        rad = rng.uniform(*sp.radius)
        level = rng.uniform(*sp.intensity)
        cov, sl = _segment_coverage((H, W), (cr, cc), (cr, cc), 2 * rad)
        if cov is None:
            continue
        page[sl] = np.minimum(page[sl], spec.paper + cov * (level - spec.paper))
        dirt_mask[sl] |= cov > 0.5
        dirt.append({"kind": "spot", "center": [cr, cc], "radius": rad, "intensity": level})

    if spec.noise > 0:
        page = page + spec.noise * rng.standard_normal(page.shape)
    page = np.clip(page, 0.0, 1.0)
    truth = GroundTruth(instances=instances, dirt=dirt, ink_area=int(ink_mask.sum()),
                        dirt_area=int(dirt_mask.sum()))
    return PageRaster(page), truth


# ---------------------------------------------------------------------------
# config files


def _pair(text, cast=float):
    parts = [p for p in str(text).replace("x", ",").split(",") if p.strip()]
    vals = tuple(cast(p) for p in parts)
    return vals if len(vals) == 2 else (vals[0], vals[0])


def load_document_spec(path_or_text, **overrides):
    """Read a DocumentSpec from an INI file (or INI text).

    Sections ``[document]``, ``[strokes]`` and ``[spots]``; see docs/FORMATS.md.
    """
    cp = configparser.ConfigParser()
    if "\n" in str(path_or_text) or str(path_or_text).lstrip().startswith("["):
        cp.read_string(str(path_or_text))
    else:
        with open(path_or_text) as fh:
            cp.read_file(fh)
    d = cp["document"] if cp.has_section("document") else {}
    kw = {}
    if "page_dims" in d:
        kw["page_dims"] = _pair(d["page_dims"], int)
    if "glyphs" in d:
        kw["glyphs"] = tuple(g.strip() for g in d["glyphs"].split(",") if g.strip())
        unknown = [g for g in kw["glyphs"] if g not in NAMES]
        if unknown:
            raise ValueError(f"unknown glyphs {unknown}; available: {', '.join(NAMES)}")
    for key, cast in (("instances_per_glyph", int), ("jitter", int), ("margin", int),
                      ("glyph_scale", int), ("ink", float), ("paper", float),
                      ("noise", float), ("rng_seed", int)):
        if key in d:
            kw[key] = cast(d[key])
    if "placement" in d:
        kw["placement"] = d["placement"].strip()
    if "pitch" in d:
        kw["pitch"] = _pair(d["pitch"], int)
    if cp.has_section("strokes"):
        s = cp["strokes"]
        kw["strokes"] = StrokeSpec(
            count=int(s.get("count", 0)),
            length=_pair(s.get("length", "20,60")),
            thickness=_pair(s.get("thickness", "1,2")),
            orientation=_pair(s.get("orientation", "0,180")),
        )
    if cp.has_section("spots"):
        s = cp["spots"]
        kw["spots"] = SpotSpec(
            count=int(s.get("count", 0)),
            radius=_pair(s.get("radius", "2,6")),
            intensity=_pair(s.get("intensity", "0.3,0.7")),
        )
    kw.update(overrides)
    return DocumentSpec(**kw)


def spec_to_dict(spec):
    d = asdict(spec)
    d["glyphs"] = [g if isinstance(g, str) else np.asarray(g).astype(int).tolist() for g in spec.glyphs]
    return d


# ---------------------------------------------------------------------------
# scoring


def _detections(report):
    """(class, centre) pairs from a cleaning report or its JSON form."""
    accepted = getattr(report, "accepted", None)
    if accepted is None:
        accepted = report["accepted"] if isinstance(report, dict) else report
    out = []
    for a in accepted:
        if isinstance(a, dict):
            c, box = int(a["class"]), a["box"]
        else:
            c, box = int(a.c), a.box
        out.append((c, ((box[0] + box[2] - 1) / 2.0, (box[1] + box[3] - 1) / 2.0)))
    return out


def infer_class_map(detections, truth, tolerance):
    """Model class -> glyph id by majority vote of the nearest truth instance."""
    if not truth.instances:
        return {}
    centres = np.array([g.center for g in truth.instances])
    gids = np.array([g.glyph_id for g in truth.instances])
    votes = {}
    for c, ctr in detections:
        d = np.hypot(*(centres - np.asarray(ctr)).T)
        j = int(np.argmin(d))
        if d[j] <= tolerance:
            votes.setdefault(c, {}).setdefault(int(gids[j]), 0)
            votes[c][int(gids[j])] += 1
    return {c: min(v, key=lambda g: (-v[g], g)) for c, v in votes.items()}


def score_cleaning(report, truth, position_tolerance=6.0, class_map=None):
    """Precision and recall of accepted matches against the ground truth.

    Detections and truth instances are compared by ink-box centre. Pairs of
    the same glyph within ``position_tolerance`` pixels are assigned
    one-to-one, closest first; the result does not depend on report order.
    Without ``class_map``, model classes are mapped to glyphs by majority
    vote.
    """
    dets = _detections(report)
    if class_map is None:
        class_map = infer_class_map(dets, truth, position_tolerance)
    pairs = []
    for i, (c, ctr) in enumerate(dets):
        g = class_map.get(c)
        for j, inst in enumerate(truth.instances):
            if inst.glyph_id != g:
                continue
            d = math.hypot(ctr[0] - inst.center[0], ctr[1] - inst.center[1])
            if d <= position_tolerance:
                pairs.append((d, ctr, c, j, i))
    pairs.sort(key=lambda p: p[:4])
    used_d, used_t = set(), set()
    tp = 0
    for d, _, _, j, i in pairs:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        tp += 1
    n_det, n_true = len(dets), len(truth.instances)
    return {
        "recall": tp / n_true if n_true else 1.0,
        "precision": tp / n_det if n_det else 1.0,
        "true_positives": tp,
        "false_positives": n_det - tp,
        "false_negatives": n_true - tp,
        "class_map": {int(k): int(v) for k, v in class_map.items()},
    }
