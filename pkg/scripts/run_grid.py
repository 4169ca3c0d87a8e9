#!/usr/bin/env python3
"""Run a whole experiment: data, bases, networks, diagnostics and report.

    python3 scripts/run_grid.py --config my.json --out runs

Each step stores its artifacts under ``<out>/<config hash>/`` and skips work
already on disk, so an interrupted run can simply be restarted.  ``--cells``
limits training to a fraction of the grid for quick looks.
"""
import argparse
import logging
import time

from ridgeline.experiment import pipeline
from ridgeline.experiment.config import ExperimentConfig

log = logging.getLogger("run_grid")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--rank", type=int, action="append", help="train only these ranks")
    p.add_argument("--skip-diagnostics", action="store_true", help="no projection error or bound check")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig.load(args.config)
    ws = pipeline.Workspace(cfg, args.out)
    t0 = time.perf_counter()
    pipeline.generate_data(ws)
    log.info("data ready (%.0f s)", time.perf_counter() - t0)
    for kind in ("as", "kle", "pod"):
        b = pipeline.compute_basis(ws, kind)
        log.info("%s basis rank %d, leading eigenvalue %.4e", kind, b.rank, b.eigenvalues[0])

    ranks = [cfg.clamp_rank(r) for r in args.rank] if args.rank else None
    cells = pipeline.grid(ws, ranks=ranks)
    for i, cell in enumerate(cells, 1):
        row = pipeline.evaluate_cell(ws, *cell)
        log.info("[%d/%d] %s accuracy %.3f", i, len(cells), pipeline.cell_name(*cell), row["accuracy"])

    if not args.skip_diagnostics:
        for row in pipeline.projection_errors(ws):
            log.info("projection error %s r=%d: %.4e +- %.1e", row["mode"], row["rank"], row["mean"], row["stderr"])
        bound = pipeline.run_bound_check(ws)
        log.info("bound check LHS %.4e RHS %.4e passed=%s", bound["lhs"], bound["rhs"], bound["passed"])

    out = pipeline.report(ws, expected=cells)
    log.info("report: %s, %d cells, %d gaps, %.0f s total", out["status"], len(out["accuracy"]),
             len(out["gaps"]), time.perf_counter() - t0)
    print(ws.path("report.json"))


if __name__ == "__main__":
    main()
