#!/usr/bin/env python3
"""Print mean test accuracy per (rank, n_train) and mode from a report.json.

    python3 scripts/accuracy_table.py runs/<hash>/report.json
"""
import json
import sys


def main(path):
    with open(path, encoding="utf-8") as fh:
        rep = json.load(fh)
    modes = sorted({c["mode"] for c in rep["accuracy"]}, key=["as", "kle", "rs", "fs"].index)
    cells = {(c["rank"], c["n_train"], c["mode"]): c for c in rep["accuracy"]}
    keys = sorted({(r, n) for r, n, _ in cells})
    print(f"{'rank':>5} {'N':>6} " + " ".join(f"{m.upper():>16}" for m in modes))
    for r, n in keys:
        row = []
        for m in modes:
            c = cells.get((r, n, m))
            row.append(f"{c['accuracy_mean']:8.3f} +- {c['accuracy_std']:5.3f}" if c else f"{'-':>16}")
        print(f"{r:5d} {n:6d} " + " ".join(row))
    for g in rep["gaps"]:
        print(f"gap: {g['mode']} r={g['rank']} N={g['n_train']} missing seeds {g['missing_seeds']}")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
