#!/usr/bin/env python3
"""Four init x measure combinations on one dataset: NNC table, mean curves, baseline.

    python3 scripts/compare_configs.py --out runs/compare --images 20 --lr 1,0.1
"""

import argparse
import logging

from dlglab.harness import parse_config, run_bench


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--dataset", default="synth:binary_strokes")
    p.add_argument("--arch", default="lenet5")
    p.add_argument("--size", default="32")
    p.add_argument("--images", default="10")
    p.add_argument("--iters", default="300")
    p.add_argument("--lr", default="0.1")
    p.add_argument("--optimizer", default="lbfgs")
    p.add_argument("--seed", default="0")
    p.add_argument("--workers", default="1")
    p.add_argument("--out", default="runs/compare")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    spec = parse_config("init=tg,unif\nmeasure=eucl,ag\n", {
        "dataset": args.dataset, "arch": args.arch, "size": args.size, "images": args.images,
        "iters": args.iters, "lr": args.lr, "optimizer": args.optimizer, "seed": args.seed,
        "workers": args.workers, "out": args.out,
    })
    report = run_bench(spec)
    print(open(f"{args.out}/nnc.csv").read(), end="")
    for cfg in spec.configs:
        mse = report.converged_mean(cfg.label, "final_mse")
        ssim = report.converged_mean(cfg.label, "final_ssim")
        print(f"{cfg.label:28s} NNC {report.nnc[cfg.label]:3d}  MSE {mse:.3e}  SSIM {ssim:.3f}")
    print(f"random-image baseline         MSE {report.baseline[0]:.3e}  SSIM {report.baseline[1]:.3f}")


if __name__ == "__main__":
    main()
