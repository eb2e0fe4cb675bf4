#!/usr/bin/env python3
"""Rebuild mean curves from trace.csv + summary.csv and diff them against curves.csv.

Uses only the csv module, so it checks the harness aggregation independently.
Exit status 1 if any value differs by more than --tol.

    python3 scripts/recompute_curves.py runs/compare
"""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("run_dir", type=Path)
    p.add_argument("--tol", type=float, default=1e-12)
    args = p.parse_args()

    summary = rows(args.run_dir / "summary.csv")
    keep = {(r["config"], r["image"]) for r in summary if r["converged"] == "true"}
    sums = defaultdict(lambda: [0, 0.0, 0.0, 0.0])
    for r in rows(args.run_dir / "trace.csv"):
        if (r["config"], r["image"]) in keep:
            acc = sums[(r["config"], int(r["iter"]))]
            acc[0] += 1
            for k, name in enumerate(("loss", "mse", "ssim"), 1):
                acc[k] += float(r[name])

    worst, bad = 0.0, 0
    curves = rows(args.run_dir / "curves.csv")
    for r in curves:
        n, *tot = sums[(r["config"], int(r["iter"]))]
        if n != int(r["runs"]):
            bad += 1
            continue
        for name, t in zip(("loss", "mse", "ssim"), tot):
            worst = max(worst, abs(float(r[name]) - t / n))
    if len(curves) != len(sums):
        bad += 1
    nnc = defaultdict(int)
    for r in summary:
        nnc[r["config"]] += r["converged"] == "false"
    for label, n in sorted(nnc.items()):
        print(f"{label}: NNC {n}")
    print(f"curve rows {len(curves)}, max abs diff {worst:.3e}, count mismatches {bad}")
    sys.exit(1 if bad or worst > args.tol else 0)


if __name__ == "__main__":
    main()
