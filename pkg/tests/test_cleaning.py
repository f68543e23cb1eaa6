import numpy as np
import pytest

from docclean.background import fit_background
from docclean.cleaning import (CleaningConfig, best_exemplars, clean_document, mask_box,
                               match_patches, page_mode)
from docclean.features import FeatureConfig, PageRaster, page_dataset
from docclean.glyphs import glyph
from docclean.model import ModelParams
from docclean.synthgen import _ink_box, DocumentSpec, GroundTruth, StrokeSpec, render_document, score_cleaning

INK, PAPER = 0.1, 0.95


def _model(names, patch_dims, bg_page):
    W = np.stack([np.where(glyph(n), INK, PAPER)[:, :, None] for n in names])
    C = len(names)
    params = ModelParams(pi=np.full(C, 1.0 / C), W=W, phi=np.full(W.shape, 0.03 ** 2),
                         alpha=np.stack([np.where(glyph(n), 0.95, 0.05) for n in names]), patch_dims=patch_dims)
    return params


def _page(shape, placements, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    a = np.full(shape, PAPER)
    for name, (r, c) in placements:
        g = glyph(name)
        a[r:r + 12, c:c + 12][g] = INK
    a = np.clip(a + noise * rng.standard_normal(shape), 0, 1)
    return PageRaster(a)


def _setup(page, names=("a", "e"), patch=(16, 16), stride=(4, 4)):
    fc = FeatureConfig(patch_size=patch, stride=stride, kind="color")
    ref, _ = render_document(DocumentSpec(glyphs=names, instances_per_glyph=10,
                                          page_dims=(120, 120), noise=0.01,
                                          strokes=StrokeSpec(count=4)))
    _, grids = page_dataset(ref, fc)
    bg = fit_background(grids)
    return _model(names, fc.grid_dims, page), bg, fc


def test_single_glyph_page():
    page = _page((40, 40), [("a", (14, 10))], noise=0.01)
    params, bg, fc = _setup(page)
    rec, rep = clean_document(page, params, bg, fc)
    assert len(rep.accepted) == 1
    a = rep.accepted[0]
    r0, c0, r1, c1 = _ink_box(glyph("a"))
    assert a.c == 0 and a.position == (14, 10) and a.box == (14 + r0, 10 + c0, 14 + r1, 10 + c1)
    assert rep.passes == 2 and rep.per_pass == [1, 0]
    dark = rec.data[:, :, 0] < 0.5
    assert dark.sum() == glyph("a").sum()
    assert dark[14:26, 10:22].sum() == glyph("a").sum()


def test_blank_page_one_pass():
    page = PageRaster(np.full((40, 40), PAPER))
    params, bg, fc = _setup(page)
    rec, rep = clean_document(page, params, bg, fc)
    assert rep.accepted == [] and rep.passes == 1
    np.testing.assert_allclose(rec.data, page_mode(page)[0])


def test_pure_dirt_rejected():
    page, _ = render_document(DocumentSpec(instances_per_glyph=0, page_dims=(64, 64),
                                           strokes=StrokeSpec(count=6, thickness=(1.5, 2.5))))
    params, bg, fc = _setup(page)
    _, rep = clean_document(page, params, bg, fc)
    assert rep.accepted == [] and rep.passes == 1


def test_competing_glyphs_found_in_second_pass():
    page = _page((28, 16), [("a", (1, 2)), ("e", (15, 2))])
    params, bg, fc = _setup(page, patch=(28, 16), stride=(28, 16))
    _, rep = clean_document(page, params, bg, fc)
    assert rep.per_pass[:2] == [1, 1]
    assert sorted((a.c, a.position) for a in rep.accepted) == [(0, (1, 2)), (1, (15, 2))]


def test_clean_exemplar_preferred():
    spots = [("a", (2, 2)), ("a", (2, 22)), ("e", (22, 2))]
    page = _page((40, 40), spots, noise=0.0)
    dirty = page.data.copy()
    dirty[2:14, 2:14] = np.clip(dirty[2:14, 2:14] + 0.05 * np.random.default_rng(1).standard_normal((12, 12, 1)), 0, 1)
    page = PageRaster(dirty)
    params, bg, fc = _setup(page)
    patches, grids = page_dataset(page, fc)
    cfg = CleaningConfig()
    matches = match_patches(params, bg, patches, fc, cfg)
    ex, missing = best_exemplars(page, matches, params, patches, fc, [0, 1])
    assert missing == []
    k = ex[0].patch_id
    assert patches[k].origin[1] + matches[k].x[1] == 22
    r0, c0, r1, c1 = _ink_box(glyph("a"))
    np.testing.assert_array_equal(ex[0].bitmap, page.data[2 + r0:2 + r1, 22 + c0:22 + c1])


def test_threshold_is_a_gate():
    page, truth = render_document(DocumentSpec(glyphs=("a", "e"), instances_per_glyph=4,
                                               page_dims=(80, 80), strokes=StrokeSpec(count=4),
                                               noise=0.02, rng_seed=2))
    params, bg, fc = _setup(page)
    keys = []
    for q in (0.9, 0.7, 0.5):
        _, rep = clean_document(page, params, bg, fc, CleaningConfig(q_threshold=q, max_passes=1))
        keys.append({(a.c, a.position) for a in rep.accepted})
    assert keys[0] <= keys[1] <= keys[2]
    s = score_cleaning(rep, truth)
    assert s["recall"] == 1.0 and s["precision"] == 1.0


def test_mask_box_and_validation():
    params = _model(("a",), (16, 16), None)
    assert mask_box(params, 0) == _ink_box(glyph("a"))
    assert mask_box(params.replace(alpha=np.full((1, 12, 12), 0.5)), 0) == (0, 0, 12, 12)
    assert mask_box(params.replace(alpha=np.zeros((1, 12, 12))), 0) is None
    with pytest.raises(ValueError):
        CleaningConfig(max_passes=0)
    with pytest.raises(ValueError):
        CleaningConfig(q_threshold=1.5)


def test_report_serialisable():
    import json
    page = _page((40, 40), [("e", (5, 20))])
    params, bg, fc = _setup(page)
    _, rep = clean_document(page, params, bg, fc)
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["counts"] == {"1": 1} and d["accepted"][0]["pass"] == 1
    assert GroundTruth([], [], 0, 0).to_dict()["instances"] == []
