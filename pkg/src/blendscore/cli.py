"""Command-line entry point.

Subcommands map onto experiment kinds::

    sample            prior_sampling
    sweep             regime_sweep
    correlate         correlation_curve
    variance-profile  variance_profile
    posterior         posterior_sampling
    metrics           rmse_vs_nref, or two-sample metrics on saved sample files

The output root defaults to ``$BLENDSCORE_OUT`` (else ``./results``); each run
writes into ``<root>/<experiment>-<config hash>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .experiments import default_config, load_config, run_experiment, write_result

SUBCOMMANDS = {
    "sample": "prior_sampling",
    "sweep": "regime_sweep",
    "correlate": "correlation_curve",
    "variance-profile": "variance_profile",
    "posterior": "posterior_sampling",
    "metrics": "rmse_vs_nref",
}
OUT_ENV = "BLENDSCORE_OUT"


def _common(p):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, action="append",
                   help="seed (repeatable); replaces the configured seed list")
    p.add_argument("--n-ref", type=int, action="append", dest="n_ref",
                   help="reference bank size (repeatable); replaces the schedule")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--paper-scale", action="store_true", help="use the full-size budgets")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    p.add_argument("--save-samples", action="store_true", help="write generated samples")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="blendscore", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind} experiment")
        _common(p)
        if name == "metrics":
            p.add_argument("--samples", type=Path, help="sample file to score")
            p.add_argument("--against", type=Path, help="reference sample file for MMD")
            p.add_argument("--target", help="target preset for KSD")
    return parser


def _config(args, kind):
    overrides = {}
    if args.seed:
        overrides["seeds"] = args.seed
    if args.n_ref:
        overrides["n_ref"] = args.n_ref
    if args.config:
        doc = json.loads(args.config.read_text())
        if doc.get("experiment", kind) != kind:
            raise SystemExit(f"config is for {doc['experiment']!r}, not {kind!r}")
        doc["experiment"] = kind
        doc.update(overrides)
        return load_config(doc, paper_scale=args.paper_scale)
    return default_config(kind, paper_scale=args.paper_scale, **overrides)


def _file_metrics(args):
    from .metrics import imq, ksd2, mmd, rbf, regime_mmd_bandwidth
    from .presets import get_target
    from .targets import gmm_score

    X = io.read_samples(args.samples)
    out = {"n": int(X.shape[0]), "d": int(X.shape[1])}
    if args.against:
        Y = io.read_samples(args.against)
        out["mmd"] = mmd(X, Y, rbf(regime_mmd_bandwidth(X.shape[1])))
    if args.target:
        gmm = get_target(args.target)
        out["ksd"] = float(np.sqrt(max(ksd2(X, lambda x: gmm_score(gmm, x), imq()), 0.0)))
    print(json.dumps(out))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "metrics" and args.samples:
        return _file_metrics(args)
    kind = SUBCOMMANDS[args.command]
    cfg = _config(args, kind)
    out = args.out or (Path(cfg.out) if cfg.out else None)
    if out is None:
        out = Path(os.environ.get(OUT_ENV, "results")) / f"{kind}-{cfg.hash()}"
    result = run_experiment(cfg, jobs=args.jobs, keep_samples=args.save_samples)
    write_result(result, out, plots=not args.no_plots)
    print(f"{kind}: {len(result.metrics)} rows, {result.nfe} NFE, "
          f"{result.wall_clock:.1f} s -> {out}")
    for err in result.errors:
        print(f"error: {err}", file=sys.stderr)
    return 0 if result.complete else 1


if __name__ == "__main__":
    sys.exit(main())
