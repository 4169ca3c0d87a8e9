"""``ridgeline`` command-line driver.

Exit codes: 0 success, 2 configuration error (including missing inputs),
3 numerical failure.  ``--seed`` sets the experiment seed for data and basis
steps; for ``train`` and ``evaluate`` it selects one network seed instead
(by default all ``base_seed + i`` seeds are run).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ConfigError, NumericalError
from .config import MODES, ExperimentConfig
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR", help="output root (overrides config 'out')")
    common.add_argument("-v", "--verbose", action="store_true")

    cells = argparse.ArgumentParser(add_help=False)
    cells.add_argument("--mode", choices=MODES)
    cells.add_argument("--rank", type=int, metavar="R")
    cells.add_argument("--ntrain", type=int, metavar="N")

    p = argparse.ArgumentParser(prog="ridgeline", description="Projected ridge-network experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="sample parameters and evaluate the map")
    cb = sub.add_parser("compute-basis", parents=[common], help="compute AS, KLE and POD bases")
    cb.add_argument("--kind", choices=("as", "kle", "pod", "random"), action="append",
                    help="basis kind (repeatable; default as, kle, pod)")
    cb.add_argument("--rank", type=int, metavar="R", help="rank for --kind random")
    sub.add_parser("train", parents=[common, cells], help="train networks")
    sub.add_parser("evaluate", parents=[common, cells], help="evaluate networks on the test split")
    pe = sub.add_parser("project-error", parents=[common], help="projection error vs rank")
    pe.add_argument("--rank", type=int, metavar="R", action="append")
    bc = sub.add_parser("bound-check", parents=[common], help="nested Monte Carlo ridge bound check")
    bc.add_argument("--rank", type=int, metavar="R")
    sub.add_parser("report", parents=[common], help="aggregate metrics into report.json / report.csv")
    return p


def _config(args):
    overrides = {}
    if args.seed is not None and args.command not in ("train", "evaluate"):
        overrides["seed"] = args.seed
    return ExperimentConfig.load(args.config, overrides)


def _cells(ws, args):
    seeds = [args.seed] if args.seed is not None else None
    ranks = [ws.cfg.clamp_rank(args.rank)] if args.rank else None
    return pipeline.grid(ws, [args.mode] if args.mode else None, ranks,
                         [args.ntrain] if args.ntrain else None, seeds)


def run(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args)
    ws = pipeline.Workspace(cfg, args.out)
    cmd = args.command
    if cmd == "generate-data":
        pipeline.generate_data(ws)
        print(ws.root)
    elif cmd == "compute-basis":
        for kind in args.kind or ["as", "kle", "pod"]:
            if kind == "random":
                r = cfg.clamp_rank(args.rank or min(cfg.ranks))
                vin, vout = pipeline.random_bases(ws, r, cfg["seed"])
                pipeline._save_basis(ws, f"random-input-r{r}-s{cfg['seed']}", vin)
                pipeline._save_basis(ws, f"random-output-r{r}-s{cfg['seed']}", vout)
            else:
                b = pipeline.compute_basis(ws, kind)
                print(f"{kind}: rank {b.rank}, leading eigenvalue {b.eigenvalues[0]:.6e}")
    elif cmd in ("train", "evaluate"):
        for mode, rank, n_train, seed in _cells(ws, args):
            if cmd == "train":
                pipeline.train_cell(ws, mode, rank, n_train, seed)
            else:
                print(json.dumps(pipeline.evaluate_cell(ws, mode, rank, n_train, seed), sort_keys=True))
    elif cmd == "project-error":
        ranks = [cfg.clamp_rank(r) for r in args.rank] if args.rank else None
        for row in pipeline.projection_errors(ws, ranks=ranks):
            print(f"{row['mode']:>4} r={row['rank']:<4d} {row['mean']:.6e} +- {row['stderr']:.2e}")
    elif cmd == "bound-check":
        row = pipeline.run_bound_check(ws, args.rank)
        print(json.dumps(row, sort_keys=True, indent=2))
    elif cmd == "report":
        out = pipeline.report(ws)
        print(f"{out['status']}: {len(out['accuracy'])} cells, {len(out['gaps'])} gaps -> "
              f"{ws.path('report.json')}")
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
