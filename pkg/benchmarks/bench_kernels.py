"""Compare the numba and numpy kernel backends on E-step workloads.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Reports milliseconds per patch for the selection pass, the candidate
scoring and the statistic accumulation, plus the largest difference
between the two backends.
"""
import argparse
import json
import time

import numpy as np

from docclean import kernels, learning, model, synthetic
from docclean.background import fit_background
from docclean.inference import SelectionConfig, build_candidates, reliable_cells

WORKLOADS = {
    # name: (classes, patch dims, pattern dims, feature dim, lambda)
    "colour-20": (3, (20, 20), (20, 20), 3, 200),
    "colour-50": (5, (50, 50), (50, 50), 3, 200),
    "document": (6, (40, 55), (30, 40), 40, 200),
}


def _params(C, D, P, F, seed):
    rng = np.random.default_rng(seed)
    if P == D and F == 3 and C <= 7:
        return synthetic.generating_params(C, D, F, seed=seed)
    A = np.where(rng.random((C,) + P) < 0.3, 0.9, 0.05)
    W = rng.random((C,) + P + (F,))
    return model.ModelParams(pi=np.full(C, 1.0 / C), W=W, phi=np.full(W.shape, 0.01),
                             alpha=A, patch_dims=D)


def _time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run(name, repeat=5, patches=4):
    C, D, P, F, lam = WORKLOADS[name]
    params = _params(C, D, P, F, seed=1)
    if P == D and F == 3:
        data, _ = model.sample_dataset(params, synthetic.default_background(F, 2), patches, seed=3)
    else:
        data = np.random.default_rng(3).random((patches,) + D + (F,))
    bg = fit_background(data)
    prep = params.prepared()
    sel = reliable_cells(params, min(lam, P[0] * P[1]))
    ctxs = learning.contexts(data, bg)
    cfg = SelectionConfig(lam=min(lam, P[0] * P[1]))
    out = {"workload": name, "C": C, "D": D, "P": P, "F": F, "lambda": int(sel.shape[1])}
    results = {}
    for backend in ("numba", "numpy"):
        if backend == "numba" and not kernels._accel.HAVE_NUMBA:
            continue
        with kernels.use_backend(backend):
            def selection():
                return [kernels.delta_sums(c.Y, c.logbg, prep, sel) for c in ctxs]

            scores = selection()
            cands = [build_candidates(s, cfg) for s in scores]

            def candidates():
                return [kernels.candidate_sums(c.Y, c.logbg, prep, k.c, k.x1, k.x2)
                        for c, k in zip(ctxs, cands)]

            def accumulate():
                stats = learning.new_stats(params)
                for c, k in zip(ctxs, cands):
                    q = np.full(len(k), 1.0 / len(k))
                    kernels.accumulate(c.Y, c.logbg, prep, k.c, k.x1, k.x2, q, stats)
                return stats

            timings = {
                "selection_ms": 1e3 * _time(selection, repeat) / patches,
                "candidates_ms": 1e3 * _time(candidates, repeat) / patches,
                "accumulate_ms": 1e3 * _time(accumulate, repeat) / patches,
            }
            results[backend] = (timings, selection(), candidates(), accumulate())
        out[backend] = results[backend][0]
    if len(results) == 2:
        a, b = results["numba"], results["numpy"]
        out["max_abs_diff"] = float(max(
            max(np.abs(x - y).max() for x, y in zip(a[1], b[1])),
            max(np.abs(x - y).max() for x, y in zip(a[2], b[2])),
            max(np.abs(x - y).max() for x, y in zip(a[3], b[3])),
        ))
        out["speedup_selection"] = b[0]["selection_ms"] / a[0]["selection_ms"]
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--patches", type=int, default=4)
    ap.add_argument("--workload", choices=sorted(WORKLOADS), action="append")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    rows = [run(w, args.repeat, args.patches) for w in (args.workload or list(WORKLOADS))]
    for r in rows:
        print(f"{r['workload']:>10}  C={r['C']} D={r['D']} P={r['P']} F={r['F']} lambda={r['lambda']}")
        for backend in ("numba", "numpy"):
            if backend in r:
                t = r[backend]
                print(f"    {backend:>6}: selection {t['selection_ms']:8.2f} ms  "
                      f"candidates {t['candidates_ms']:7.2f} ms  accumulate {t['accumulate_ms']:7.2f} ms")
        if "max_abs_diff" in r:
            print(f"    selection speedup {r['speedup_selection']:.1f}x, "
                  f"max backend difference {r['max_abs_diff']:.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
