"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line, printed in the terminal summary. The
full-scale parameter recovery run is opt-in through ``DOCCLEAN_FULL=1``.
"""
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import record
from docclean import background, learning, model, synthetic
from docclean.cleaning import CleaningConfig, clean_document
from docclean.features import FeatureConfig, GaborBankConfig, page_dataset
from docclean.inference import (EvalCounter, SelectionConfig, free_energy, joint_log_scores,
                                select, selection_scores, truncated_posterior)
from docclean.matching import map_match, match_patch
from docclean.persistence import dumps, load_model, loads, save_model
from docclean.synthgen import DocumentSpec, SpotSpec, StrokeSpec, render_document, score_cleaning
from oracles import brute_posterior, random_instance

TOL = 1e-10
ORACLE_DRAWS = 100
FULL = os.environ.get("DOCCLEAN_FULL", "") not in ("", "0")


def _oracle_instances():
    return [random_instance(1000 + s, C=2, D=(4, 4), P=(2, 2), F=1) for s in range(ORACLE_DRAWS)]


def _argmax_key(joint):
    return max(joint, key=lambda k: (joint[k], -k[0], -k[1][0], -k[1][1]))


# ---------------------------------------------------------------------------
# 1-3: exactness against brute-force enumeration


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for params, bg, Y in _oracle_instances():
        ll, joint, post, mask = brute_posterior(params, bg, Y[0])
        s = truncated_posterior(params, bg, Y[0], config=SelectionConfig.exact())
        for k, key in enumerate(s.candidates.entries):
            worst = max(worst, abs(s.q[k] - post[key]), abs(s.log_joint[k] - joint[key]),
                        float(np.abs(s.mask_post[k] - mask[key]).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= TOL and elapsed < 10.0
    record(1, ok, f"max |factorised - enumerated| = {worst:.2e} over {ORACLE_DRAWS} draws "
                  f"(tol {TOL:g}); {elapsed:.1f} s (limit 10 s)")
    assert ok


def test_criterion_2_truncation_exact_at_K1():
    worst = 0.0
    map_mismatch = 0
    for params, bg, Y in _oracle_instances():
        ll, joint, post, _ = brute_posterior(params, bg, Y[0])
        cfg = SelectionConfig(lam="all", K=1.0)
        s = truncated_posterior(params, bg, Y[0], config=cfg)
        fe = free_energy(Y, params, bg, cfg)
        worst = max(worst, abs(fe - ll), abs(s.log_evidence - ll))
        worst = max(worst, max(abs(s.q[k] - post[e]) for k, e in enumerate(s.candidates.entries)))
        m = map_match(params, bg, Y[0], cfg)
        map_mismatch += (m.c, m.x) != _argmax_key(joint)
    ok = worst <= TOL and map_mismatch == 0
    record(2, ok, f"K=1 posterior/free energy max error {worst:.2e} (tol {TOL:g}); "
                  f"MAP mismatches {map_mismatch}/{ORACLE_DRAWS}")
    assert ok


def test_criterion_3_selection_optimal_at_full_lambda():
    mismatches = 0
    for params, bg, Y in _oracle_instances():
        _, joint, _, _ = brute_posterior(params, bg, Y[0])
        s = selection_scores(params, bg, Y[0], SelectionConfig(lam="all", K=0.05))
        flat = int(np.argmax(s.ravel()))
        c, rem = divmod(flat, 16)
        mismatches += (c, divmod(rem, 4)) != _argmax_key(joint)
    record(3, mismatches == 0, f"selection argmax vs exact argmax: {mismatches} mismatches "
                               f"in {ORACLE_DRAWS} instances (allowed 0)")
    assert mismatches == 0


# ---------------------------------------------------------------------------
# 4-5: learning


def _recovery_run(seed, C, D, N, selection=None, **kw):
    gen = synthetic.generating_params(C, D, 3, seed=100 + seed)
    truebg = synthetic.default_background(3, seed=200 + seed)
    data, _ = model.sample_dataset(gen, truebg, N, seed=300 + seed)
    bg = background.fit_background(data)
    cfg = learning.LearnConfig(num_classes=C, pattern_dims=D, init="cube", rng_seed=seed,
                               selection=selection or SelectionConfig(), **kw)
    t0 = time.perf_counter()
    res = learning.run_em(data, cfg, bg)
    return gen, res, time.perf_counter() - t0


RECOVERY_LIMIT = 0.05


def test_criterion_4_parameter_recovery():
    if FULL:
        C, D, N, limit_s, label = 5, (50, 50), 1000, 30 * 60, "full"
    else:
        C, D, N, limit_s, label = 3, (20, 20), 500, 180, "reduced"
    rows = []
    for seed in range(10):
        gen, res, secs = _recovery_run(seed, C, D, N, max_iters=100)
        err, _ = synthetic.recovery_error(res.params, gen)
        rows.append((seed, err, secs, len(res.trace)))
    failures = [r for r in rows if r[1] >= RECOVERY_LIMIT]
    slow = [r for r in rows if r[2] >= limit_s]
    ok = len(failures) <= 2 and not slow
    errs = ", ".join(f"{e:.3f}" for _, e, _, _ in rows)
    record(4, ok, f"{label} config C={C} D=P={D} N={N}: {len(failures)}/10 runs with error "
                  f">= {RECOVERY_LIMIT:.0%} (allowed 2); errors [{errs}]; "
                  f"slowest run {max(r[2] for r in rows):.0f} s (limit {limit_s} s)")
    assert ok


MONO_ITERS = 12


def test_criterion_5_exact_em_monotone():
    worst = 0.0
    steps = 0
    revived = 0
    for seed in range(5):
        _, res, _ = _recovery_run(seed, 3, (20, 20), 500, selection=SelectionConfig.exact(),
                                  max_iters=MONO_ITERS, starve_fraction=0.0, convergence=1e-15)
        fe = [r["free_energy"] for r in res.trace]
        revived += sum(bool(r["dead_classes"]) for r in res.trace)
        diffs = np.diff(fe)
        steps += len(diffs)
        worst = min(worst, float(diffs.min()))
    ok = worst >= -1e-8
    record(5, ok, f"exact EM, 5 seeds x {MONO_ITERS} iterations on the reduced config: "
                  f"smallest log-likelihood step {worst:.3e} over {steps} steps (tol -1e-8); "
                  f"iterations with revived classes {revived}")
    assert ok


# ---------------------------------------------------------------------------
# 6-7: truncation efficiency and quality calibration


@pytest.fixture(scope="module")
def small_trained():
    """Model trained on D=(16,16), P=(10,10), C=3 colour data."""
    gen = synthetic.generating_params(3, (10, 10), 3, seed=7).replace(patch_dims=(16, 16))
    truebg = synthetic.default_background(3, seed=8)
    data, _ = model.sample_dataset(gen, truebg, 600, seed=9)
    bg = background.fit_background(data)
    cfg = learning.LearnConfig(num_classes=3, pattern_dims=(10, 10), init="cube", rng_seed=0,
                               restarts=3, max_iters=60)
    return learning.multi_restart(data, cfg, bg).params, bg


def test_criterion_6_truncation_efficiency(small_trained):
    rng = np.random.default_rng(0)
    C, D, P = 6, (40, 55), (30, 40)
    params = model.ModelParams(pi=np.full(C, 1 / C), W=rng.random((C,) + P + (1,)),
                               phi=np.full((C,) + P + (1,), 0.05), alpha=rng.random((C,) + P),
                               patch_dims=D)
    bg = background.fit_background(rng.random((5000, 1)))
    trunc, exact = EvalCounter(), EvalCounter()
    for _ in range(3):
        Y = rng.random(D + (1,))
        select(params, bg, Y, SelectionConfig(K=0.02), trunc)
        select(params, bg, Y, SelectionConfig.exact(), exact)
    ratio = (exact.joint / exact.patches) / (trunc.joint / trunc.patches)

    tparams, tbg = small_trained
    data, _ = model.sample_dataset(tparams, tbg, 400, seed=11)
    captured = []
    for Y in data:
        lj = joint_log_scores(tparams, tbg, Y).ravel()
        post = np.exp(lj - np.logaddexp.reduce(lj))
        _, cands, _ = select(tparams, tbg, Y, SelectionConfig(K=0.02))
        D1, D2 = tparams.patch_dims
        flat = cands.c * D1 * D2 + cands.x1 * D2 + cands.x2
        captured.append(post[flat].sum())
    frac = float(np.mean(np.array(captured) >= 0.99))
    ok = ratio >= 40 and frac >= 0.95
    record(6, ok, f"joint evaluations per patch exact/truncated = {ratio:.1f} (need >= 40); "
                  f"patches with >= 0.99 exact mass in K_n: {frac:.1%} (need >= 95%)")
    assert ok


def test_criterion_7_quality_calibration(small_trained):
    params, bg = small_trained
    rng = np.random.default_rng(5)
    D, P = params.patch_dims, params.pattern_dims
    clean_q = []
    for t in range(100):
        c = t % params.num_classes
        x = (int(rng.integers(D[0] - P[0] + 1)), int(rng.integers(D[1] - P[1] + 1)))
        Y, _ = model.sample_patch(params, bg, rng, c=c, x=x, mask=params.alpha[c] > 0.5)
        clean_q.append(match_patch(params, bg, Y).quality)
    bg_q = [match_patch(params, bg, bg.sample(rng, D)).quality for _ in range(1000)]
    low = float(np.mean(np.array(bg_q) < 0.5))
    ok = min(clean_q) >= 0.99 and low >= 0.99
    record(7, ok, f"clean instances: min Q {min(clean_q):.4f} (need >= 0.99, 100 trials); "
                  f"background patches with Q < 0.5: {low:.1%} (need >= 99%, 1000 trials)")
    assert ok


# ---------------------------------------------------------------------------
# 8: desk-scale cleaning

DESK_DOC = DocumentSpec(strokes=StrokeSpec(count=80), spots=SpotSpec(count=40),
                        placement="jittered", rng_seed=0)
DESK_FEATURES = FeatureConfig(patch_size=(32, 32), stride=(16, 16), kind="gabor",
                              gabor=GaborBankConfig(num_orientations=4, num_scales=2), subsample=2)
DESK_LEARN = learning.LearnConfig(num_classes=6, pattern_dims=(6, 6), max_iters=60,
                                  restarts=1, rng_seed=0, split_merge=3)
DESK_TOLERANCE = 3.0 * DESK_FEATURES.subsample


@pytest.mark.slow
def test_criterion_8_desk_cleaning():
    t0 = time.perf_counter()
    page, truth = render_document(DESK_DOC)
    dirt = truth.dirt_area / truth.ink_area
    _, grids = page_dataset(page, DESK_FEATURES)
    data = np.stack([g.values for g in grids])
    bg = background.fit_background(data)
    res = learning.multi_restart(data, DESK_LEARN, bg)
    classes = learning.classify_classes(res.params).character_classes
    _, report = clean_document(page, res.params, bg, DESK_FEATURES,
                               CleaningConfig(classes=classes))
    s = score_cleaning(report, truth, DESK_TOLERANCE)
    minutes = (time.perf_counter() - t0) / 60
    ok = (s["recall"] >= 0.95 and s["precision"] >= 0.99 and report.passes <= 5
          and dirt >= 0.10 and minutes < 60)
    record(8, ok, f"{len(truth.instances)} glyphs, dirt {dirt:.1%} of ink: recall "
                  f"{s['recall']:.3f} (>= 0.95), precision {s['precision']:.3f} (>= 0.99), "
                  f"passes {report.passes} (<= 5), {minutes:.1f} min (< 60)")
    assert ok


# ---------------------------------------------------------------------------
# 9-10: determinism and serialisation

DOC_INI = """[document]
page_dims = 100x100
glyphs = a, e
instances_per_glyph = 8
placement = jittered
[strokes]
count = 3
length = 10, 20
"""

LEARN_INI = """[features]
features = gabor
patch-size = 24x24
stride = 12x12
subsample = 1
gabor-orientations = 4
gabor-scales = 1
[learn]
classes = 3
pattern-size = 12x12
max-iters = 6
restarts = 2
"""


def _run_cli(args, threads=None, numba_threads=4):
    env = dict(os.environ, NUMBA_NUM_THREADS=str(numba_threads))
    cmd = [sys.executable, "-m", "docclean"]
    if threads is not None:
        cmd += ["--threads", str(threads)]
    r = subprocess.run(cmd + list(args), capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    return r


def _pipeline(d, threads):
    d.mkdir()
    (d / "doc.ini").write_text(DOC_INI)
    (d / "learn.ini").write_text(LEARN_INI)
    _run_cli(["synth", "--config", str(d / "doc.ini"), "--seed", "3", "--out", str(d / "p.png"),
              "--truth", str(d / "t.json")], threads)
    _run_cli(["learn", str(d / "p.png"), "--config", str(d / "learn.ini"), "--out",
              str(d / "m.bin"), "--trace", str(d / "trace.jsonl")], threads)
    _run_cli(["clean", "--model", str(d / "m.bin"), "--page", str(d / "p.png"), "--out",
              str(d / "r.png"), "--report", str(d / "rep.json")], threads)
    trace = [json.loads(line) for line in open(d / "trace.jsonl")]
    for r in trace:
        r.pop("seconds")
    return {name: (d / name).read_bytes() for name in ("p.png", "m.bin", "r.png", "rep.json")}, trace


def test_criterion_9_determinism(tmp_path):
    a = _pipeline(tmp_path / "t1", threads=1)
    b = _pipeline(tmp_path / "t4", threads=4)
    c = _pipeline(tmp_path / "t4b", threads=4)
    diff = [k for k in a[0] if not (a[0][k] == b[0][k] == c[0][k])]
    same_trace = a[1] == b[1] == c[1]
    ok = not diff and same_trace
    record(9, ok, "synth/learn/clean outputs byte-identical across repeated runs and "
                  f"--threads 1 vs 4: {'yes' if ok else 'differs in ' + str(diff or ['trace'])}")
    assert ok


CROSS_SCRIPT = """
import json, sys
from docclean.cli import feature_config_from_dict
from docclean.cleaning import CleaningConfig, clean_document
from docclean.imageio import read_page
from docclean.persistence import load_model
params, bg, meta = load_model(sys.argv[1])
fc = feature_config_from_dict(meta["features"])
_, rep = clean_document(read_page(sys.argv[2]), params, bg, fc,
                        CleaningConfig(classes=meta["character_classes"]))
print(json.dumps(rep.to_dict(), sort_keys=True))
"""


def test_criterion_10_serialisation(tmp_path):
    bad = 0
    for s in range(50):
        rng = np.random.default_rng(s)
        C = int(rng.integers(1, 6))
        P = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        D = (P[0] + int(rng.integers(0, 4)), P[1] + int(rng.integers(0, 4)))
        F = int(rng.integers(1, 5))
        params, bg, _ = random_instance(s, C=C, D=D, P=P, F=F)
        p2, bg2, _ = loads(dumps(params, bg, {"seed": s}))
        same = all(np.array_equal(getattr(params, n), getattr(p2, n))
                   for n in ("pi", "W", "phi", "alpha"))
        same &= all(np.array_equal(getattr(bg, n), getattr(bg2, n))
                    for n in ("edges", "densities", "floor"))
        same &= p2.patch_dims == params.patch_dims and p2.var_floor == params.var_floor
        bad += not same

    from docclean.cli import feature_config_from_dict
    from docclean.imageio import read_page, write_page
    d = tmp_path
    page, _ = render_document(DocumentSpec(glyphs=("a", "e"), instances_per_glyph=8,
                                           page_dims=(100, 100), placement="jittered",
                                           strokes=StrokeSpec(count=3, length=(10, 20)),
                                           rng_seed=4))
    write_page(d / "p.png", page)
    page = read_page(d / "p.png")
    fc = FeatureConfig(patch_size=(24, 24), stride=(12, 12),
                       gabor=GaborBankConfig(num_orientations=4, num_scales=1), subsample=1)
    _, grids = page_dataset(page, fc)
    data = np.stack([g.values for g in grids])
    bg = background.fit_background(data)
    params = learning.run_em(data, learning.LearnConfig(3, (12, 12), max_iters=5), bg).params
    from docclean.cli import feature_config_to_dict
    classes = learning.classify_classes(params).character_classes
    save_model(d / "m.bin", params, bg, {"features": feature_config_to_dict(fc),
                                         "character_classes": classes})
    p2, bg2, meta = load_model(d / "m.bin")
    _, here = clean_document(page, p2, bg2, feature_config_from_dict(meta["features"]),
                             CleaningConfig(classes=classes))
    r = subprocess.run([sys.executable, "-c", CROSS_SCRIPT, str(d / "m.bin"), str(d / "p.png")],
                       capture_output=True, text=True)
    there = json.loads(r.stdout) if r.returncode == 0 else None
    same_report = there == json.loads(json.dumps(here.to_dict(), sort_keys=True))
    ok = bad == 0 and same_report
    record(10, ok, f"save/load identity failures {bad}/50; cross-process cleaning report "
                   f"{'identical' if same_report else 'differs'} ({len(here.accepted)} matches)")
    assert ok
