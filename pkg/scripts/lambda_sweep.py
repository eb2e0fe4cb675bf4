#!/usr/bin/env python3
"""Fixed lambda2 grid for the Gaussian measure plus the adaptive variant.

Writes sweep.csv (rows MSE/SSIM/NNC x TG/Unif, one column per lambda2).

    python3 scripts/lambda_sweep.py --grid extended --out runs/sweep
"""

import argparse

from dlglab.harness import SWEEP_KEYS, parse_config, run_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--dataset", default="synth:gaussian_blobs")
    p.add_argument("--arch", default="lenet5")
    p.add_argument("--size", default="32")
    p.add_argument("--images", default="10")
    p.add_argument("--iters", default="300")
    p.add_argument("--lr", default="0.1")
    p.add_argument("--grid", default="default", help="default | extended | comma list, may include ag")
    p.add_argument("--seed", default="0")
    p.add_argument("--workers", default="1")
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()

    spec = parse_config("init=tg,unif\noptimizer=lbfgs\n", {
        "dataset": args.dataset, "arch": args.arch, "size": args.size, "images": args.images,
        "iters": args.iters, "lr": args.lr, "lambda2_grid": args.grid, "seed": args.seed,
        "workers": args.workers, "out": args.out,
    }, required=SWEEP_KEYS)
    report = run_sweep(spec)
    width = max(len(c) for row in report.sweep for c in row)
    for row in report.sweep:
        print(" ".join(c.rjust(width) for c in row))


if __name__ == "__main__":
    main()
