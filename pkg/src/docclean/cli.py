"""Command line entry point: synth, learn, match, clean, eval, inspect.

Settings come from built-in defaults, then an optional INI file given with
``--config`` (section named after the subcommand, plus ``[features]`` for
the feature options), then command line flags, which win.
"""
import argparse
import configparser
import json
import logging
import os
import sys
import numpy as np

from . import _accel, __version__

log = logging.getLogger("docclean")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text):
    parts = str(text).lower().replace(",", "x").split("x")
    try:
        vals = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected HxW with positive sizes, got {text!r}")
    return vals


def _lambda(text):
    return "all" if str(text) == "all" else int(text)


# option name -> (type, default); None-valued defaults mean "not set"
FEATURE_OPTS = {
    "features": (str, "gabor"),
    "patch_size": (_dims, None),
    "stride": (_dims, None),
    "subsample": (int, 3),
    "gabor_orientations": (int, 8),
    "gabor_scales": (int, 5),
    "gabor_wavelength": (float, 4.0),
    "gabor_kernel": (int, 31),
    "gabor_response": (str, "magnitude"),
}
LEARN_OPTS = {
    "classes": (int, 6),
    "pattern_size": (_dims, None),
    "max_iters": (int, 100),
    "restarts": (int, 3),
    "seed": (int, 0),
    "bins": (int, 64),
    "convergence": (float, 1e-5),
    "lambda_": (_lambda, None),
    "trunc_K": (float, 0.02),
    "init": (str, None),
    "rel_var_floor": (float, 1e-2),
    "warmup": (int, 10),
    "starve_fraction": (float, 0.1),
    "split_merge": (int, 0),
}
MATCH_OPTS = {"lambda_": (_lambda, None), "trunc_K": (float, 0.02), "gamma": (float, 10.0)}
CLEAN_OPTS = {**MATCH_OPTS, "q_threshold": (float, 0.5), "max_passes": (int, 10)}


def _ini_key(name):
    return "lambda" if name == "lambda_" else name.replace("_", "-")


def _add_opts(p, opts):
    for name, (typ, _) in opts.items():
        flag = "--" + _ini_key(name)
        kw = {"dest": name, "default": None}
        if name == "features":
            kw["choices"] = ("color", "gabor")
        elif name == "gabor_response":
            kw["choices"] = ("magnitude", "real")
        elif name == "init":
            kw["choices"] = ("segments", "cube")
        p.add_argument(flag, type=typ, **kw)


def _merge(args, sections, opts):
    """Defaults, then INI sections, then flags."""
    cp = configparser.ConfigParser()
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cp.read(args.config)
    out = {}
    for name, (typ, default) in opts.items():
        val = default
        for sec in sections:
            if cp.has_section(sec) and cp.has_option(sec, _ini_key(name)):
                raw = cp.get(sec, _ini_key(name))
                try:
                    val = typ(raw)
                except (ValueError, argparse.ArgumentTypeError) as e:
                    raise UsageError(f"[{sec}] {_ini_key(name)}: {e}")
        flag = getattr(args, name, None)
        if flag is not None:
            val = flag
        out[name] = val
    return out


def _check_input(path):
    if not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")


def _check_output(path):
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise DataError(f"output directory does not exist: {d}")


def _selection(s, exact=False):
    from .inference import SelectionConfig
    if exact:
        return SelectionConfig.exact()
    return SelectionConfig(lam=s.get("lambda_"), K=s["trunc_K"])


def _feature_config(s, pattern=None):
    from .features import FeatureConfig, GaborBankConfig, default_stride
    kind = s["features"]
    sub = s["subsample"] if kind == "gabor" else 1
    if s["patch_size"] is None:
        raise UsageError("--patch-size is required")
    stride = s["stride"]
    if stride is None:
        base = pattern if pattern is not None else tuple(v // sub for v in s["patch_size"])
        stride = tuple(v * sub for v in default_stride(base))
    gabor = GaborBankConfig(num_orientations=s["gabor_orientations"], num_scales=s["gabor_scales"],
                            kernel_size=s["gabor_kernel"], wavelength_base=s["gabor_wavelength"],
                            response=s["gabor_response"])
    return FeatureConfig(patch_size=s["patch_size"], stride=stride, kind=kind, gabor=gabor,
                         subsample=sub)


def feature_config_to_dict(fc):
    d = {"kind": fc.kind, "patch_size": list(fc.patch_size), "stride": list(fc.stride),
         "subsample": fc.subsample}
    g = fc.gabor
    d["gabor"] = {"num_orientations": g.num_orientations, "num_scales": g.num_scales,
                  "kernel_size": g.kernel_size, "wavelength_base": g.wavelength_base,
                  "response": g.response}
    return d


def feature_config_from_dict(d):
    from .features import FeatureConfig, GaborBankConfig
    return FeatureConfig(patch_size=tuple(d["patch_size"]), stride=tuple(d["stride"]),
                         kind=d["kind"], gabor=GaborBankConfig(**d["gabor"]),
                         subsample=int(d["subsample"]))


def _load_model(path):
    from .persistence import ModelFormatError, load_model
    _check_input(path)
    try:
        params, bg, meta = load_model(path)
    except ModelFormatError as e:
        raise DataError(f"{path}: {e}")
    if "features" not in meta:
        raise DataError(f"{path}: model has no feature configuration")
    return params, bg, meta


def _load_page(path):
    from .imageio import read_page
    _check_input(path)
    try:
        return read_page(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read page {path}: {e}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .imageio import write_page
    from .synthgen import DocumentSpec, load_document_spec, render_document, spec_to_dict
    _check_output(args.out)
    if args.truth:
        _check_output(args.truth)
    over = {} if args.seed is None else {"rng_seed": args.seed}
    if args.config:
        _check_input(args.config)
        try:
            spec = load_document_spec(args.config, **over)
        except (ValueError, KeyError, configparser.Error) as e:
            raise UsageError(f"bad document config: {e}")
    else:
        spec = DocumentSpec(**over)
    try:
        page, truth = render_document(spec)
    except ValueError as e:
        raise DataError(str(e))
    write_page(args.out, page)
    if args.truth:
        with open(args.truth, "w") as fh:
            json.dump({"spec": spec_to_dict(spec), **truth.to_dict()}, fh)
    log.info("rendered %d glyphs, dirt area %d px", len(truth.instances), truth.dirt_area)
    return EXIT_OK


def cmd_learn(args):
    from .background import fit_background
    from .features import page_dataset
    from .learning import LearnConfig, classify_classes, run_em, select_best
    from .persistence import save_model
    s = _merge(args, ["learn", "features"], {**FEATURE_OPTS, **LEARN_OPTS})
    for p in args.pages:
        _check_input(p)
    _check_output(args.out)
    if args.trace:
        _check_output(args.trace)
    if s["pattern_size"] is None:
        raise UsageError("--pattern-size is required")
    fc = _feature_config(s, s["pattern_size"])
    if any(a > b for a, b in zip(s["pattern_size"], fc.grid_dims)):
        raise UsageError(f"pattern {s['pattern_size']} exceeds the feature grid {fc.grid_dims}")
    grids = []
    for p in args.pages:
        _, g = page_dataset(_load_page(p), fc)
        grids.extend(g)
    if not grids:
        raise DataError("no patches: pages are smaller than the patch size")
    data = np.stack([g.values for g in grids])
    bg = fit_background(data, s["bins"])
    init = s["init"] or ("cube" if fc.kind == "color" else "segments")
    cfg = LearnConfig(num_classes=s["classes"], pattern_dims=tuple(s["pattern_size"]),
                      max_iters=s["max_iters"], restarts=s["restarts"], rng_seed=s["seed"],
                      convergence=s["convergence"], selection=_selection(s, args.exact), init=init,
                      rel_var_floor=s["rel_var_floor"], warmup=s["warmup"],
                      starve_fraction=s["starve_fraction"], split_merge=s["split_merge"],
                      snapshot_every=args.snapshot_every)
    trace_fh = open(args.trace, "w") if args.trace else None
    run = {"r": 0}

    def cb(rec):
        if trace_fh:
            trace_fh.write(json.dumps({"restart": run["r"], **rec}) + "\n")
        if "move" in rec:
            log.info("restart %d move %d: %s", run["r"], rec["move"],
                     "accepted" if rec["accepted"] else "rejected")
        elif rec["iteration"] == 1 or rec["iteration"] % 10 == 0:
            log.info("restart %d iteration %d: free energy %.3f", run["r"], rec["iteration"],
                     rec["free_energy"])

    try:
        runs = []
        for r in range(cfg.restarts):
            run["r"] = r
            sub = LearnConfig(**{**cfg.__dict__, "rng_seed": cfg.rng_seed + r})
            runs.append(run_em(data, sub, bg, callback=cb))
        best = select_best(runs)
        params = runs[best].params
    except ValueError as e:
        raise DataError(str(e))
    finally:
        if trace_fh:
            trace_fh.close()
    rep = classify_classes(params)
    meta = {
        "features": feature_config_to_dict(fc),
        "selection": {"lambda": cfg.selection.lam, "K": cfg.selection.K},
        "learn": {"classes": cfg.num_classes, "pattern_size": list(cfg.pattern_dims),
                  "seed": cfg.rng_seed, "restarts": cfg.restarts, "best_restart": best,
                  "iterations": sum("iteration" in r for r in runs[best].trace), "free_energy": runs[best].free_energy},
        "character_classes": rep.character_classes,
        "num_patches": int(len(data)),
        "version": __version__,
    }
    save_model(args.out, params, bg, meta)
    log.info("saved model with %d character classes to %s", rep.num_characters, args.out)
    return EXIT_OK


def cmd_match(args):
    from .features import page_dataset
    from .matching import match_patch
    params, bg, meta = _load_model(args.model)
    page = _load_page(args.page)
    if args.out:
        _check_output(args.out)
    s = _merge(args, ["match"], MATCH_OPTS)
    fc = feature_config_from_dict(meta["features"])
    sel = _selection(s, args.exact)
    patches, grids = page_dataset(page, fc)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for k, (p, g) in enumerate(zip(patches, grids)):
            m = match_patch(params, bg, g, sel, s["gamma"])
            out.write(json.dumps({"patch": k, "origin": list(p.origin), "class": m.c,
                                  "x": list(m.x), "Q": m.quality,
                                  "fully_visible": m.fully_visible}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_clean(args):
    from .cleaning import CleaningConfig, clean_document
    from .imageio import write_page
    params, bg, meta = _load_model(args.model)
    page = _load_page(args.page)
    _check_output(args.out)
    if args.report:
        _check_output(args.report)
    s = _merge(args, ["clean"], CLEAN_OPTS)
    fc = feature_config_from_dict(meta["features"])
    cfg = CleaningConfig(q_threshold=s["q_threshold"], max_passes=s["max_passes"],
                         gamma=s["gamma"], selection=_selection(s, args.exact),
                         classes=meta.get("character_classes"))
    rec, report = clean_document(page, params, bg, fc, cfg)
    write_page(args.out, rec)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh)
    log.info("%d matches accepted in %d passes", len(report.accepted), report.passes)
    return EXIT_OK


def cmd_eval(args):
    from .synthgen import GroundTruth, score_cleaning
    _check_input(args.report)
    _check_input(args.truth)
    try:
        with open(args.report) as fh:
            report = json.load(fh)
        with open(args.truth) as fh:
            truth = GroundTruth.from_dict(json.load(fh))
    except (ValueError, KeyError) as e:
        raise DataError(f"cannot parse report or truth: {e}")
    tol = args.tolerance
    if tol is None:
        tol = 3.0 * float(args.subsample)
    scores = score_cleaning(report, truth, tol)
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args):
    from .learning import classify_classes
    params, bg, meta = _load_model(args.model)
    rep = classify_classes(params)
    out = {
        "num_classes": params.num_classes,
        "patch_dims": list(params.patch_dims),
        "pattern_dims": list(params.pattern_dims),
        "feature_dim": params.feature_dim,
        "pi": params.pi.tolist(),
        "mean_alpha": rep.mask_strength.tolist(),
        "character_classes": rep.character_classes,
        "background_bins": bg.num_bins,
        "features": meta.get("features"),
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="docclean", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="debug logging")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic corrupted page")
    s.add_argument("--config", help="document spec (INI)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="page image (PNG/PGM/PPM)")
    s.add_argument("--truth", help="ground-truth JSON")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("learn", help="train a model on page images")
    s.add_argument("pages", nargs="+")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="model file")
    s.add_argument("--trace", help="per-iteration JSON lines")
    s.add_argument("--exact", action="store_true", help="score every (class, position) pair")
    s.add_argument("--snapshot-every", type=int, default=0)
    _add_opts(s, {**FEATURE_OPTS, **LEARN_OPTS})
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("match", help="MAP match and quality for every patch")
    s.add_argument("--model", required=True)
    s.add_argument("--page", required=True)
    s.add_argument("--out", help="JSON lines (default: standard output)")
    s.add_argument("--config")
    s.add_argument("--exact", action="store_true")
    _add_opts(s, MATCH_OPTS)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("clean", help="reconstruct a page from learned exemplars")
    s.add_argument("--model", required=True)
    s.add_argument("--page", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--config")
    s.add_argument("--exact", action="store_true")
    _add_opts(s, CLEAN_OPTS)
    s.set_defaults(func=cmd_clean)

    s = sub.add_parser("eval", help="score a cleaning report against ground truth")
    s.add_argument("--report", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--tolerance", type=float, help="pixels (default 3 x subsample)")
    s.add_argument("--subsample", type=int, default=3)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="summarise a model file")
    s.add_argument("model")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        if args.threads < 1:
            parser.print_usage(sys.stderr)
            print("docclean: error: --threads must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        _accel.set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"docclean: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"docclean: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
