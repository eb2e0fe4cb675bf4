"""Command line: attack, bench, sweep, gradcheck, baseline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, FormatError
from .gradcheck import SCOPES, gradcheck
from .harness import RUN_KEYS, SWEEP_KEYS, dataset_baseline, load_dataset, parse_config, run_bench, \
    run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_GRADCHECK = 0, 1, 2, 3

# flag -> config key
_FLAGS = {
    "dataset": "dataset", "arch": "arch", "init": "init", "measure": "measure", "lambda2": "lambda2",
    "optimizer": "optimizer", "lr": "lr", "iters": "iters", "images": "images", "seed": "seed",
    "out": "out", "size": "size", "channels": "channels", "classes": "classes", "hidden": "hidden",
    "tau": "tau", "workers": "workers", "grid": "lambda2_grid", "trials": "baseline_trials",
}


def _spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override its values")
    p.add_argument("--dataset", help="synth:<kind> | idx:<images>,<labels> | pgm:<dir>")
    p.add_argument("--arch", help="lenet5 | mlp | tiny_resnet")
    p.add_argument("--init", help="tg | unif (comma list allowed)")
    p.add_argument("--measure", help="eucl | gauss | ag (comma list allowed)")
    p.add_argument("--lambda2", help="fixed lambda2 for gauss")
    p.add_argument("--optimizer", help="lbfgs | adamw")
    p.add_argument("--lr")
    p.add_argument("--iters")
    p.add_argument("--images")
    p.add_argument("--seed")
    p.add_argument("--out")
    p.add_argument("--size", help="side length for synthetic images")
    p.add_argument("--channels")
    p.add_argument("--classes")
    p.add_argument("--hidden", help="mlp hidden widths, comma separated")
    p.add_argument("--tau", help="MSE threshold for convergence")
    p.add_argument("--workers")
    p.add_argument("--timing", action="store_true", help="record wallclock_ms (breaks byte determinism)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlglab", description="gradient inversion attack lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="reconstruct one image")
    _spec_args(p)
    p.add_argument("--index", type=int, default=0, help="dataset index of the victim image")

    p = sub.add_parser("bench", help="every config on a seeded image selection")
    _spec_args(p)

    p = sub.add_parser("sweep", help="lambda2 grid for the Gaussian measure, plus AG")
    _spec_args(p)
    p.add_argument("--grid", help="default | extended | comma list (may include ag)")

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--scope", default="primitives", choices=[*SCOPES, "all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("baseline", help="random-other-image MSE/SSIM baseline")
    _spec_args(p)
    p.add_argument("--trials")
    return parser


def _spec(args: argparse.Namespace, required, **extra):
    text = Path(args.config).read_bytes() if args.config else b""
    overrides = {key: getattr(args, flag, None) for flag, key in _FLAGS.items()}
    if args.timing:
        overrides["timing"] = True
    overrides.update(extra)
    return parse_config(text, overrides, required=required)


def _print_report(report) -> None:
    for label, n in report.nnc.items():
        runs = sum(1 for r in report.results if r.config == label)
        mse = report.converged_mean(label, "final_mse")
        ssim = report.converged_mean(label, "final_ssim")
        print(f"{label}: converged {runs - n}, NNC {n}, mean MSE {mse:.4g}, mean SSIM {ssim:.4g}")
    print(f"random-image baseline: MSE {report.baseline[0]:.4g}, SSIM {report.baseline[1]:.4g}")


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "gradcheck":
        scopes = list(SCOPES) if args.scope == "all" else [args.scope]
        ok = True
        for scope in scopes:
            rep = gradcheck(scope, seed=args.seed, instances=args.instances)
            for line in rep.lines():
                print(line)
            ok &= rep.passed
        return EXIT_OK if ok else EXIT_GRADCHECK

    if args.command == "baseline":
        spec = _spec(args, required=())
        mse, ssim = dataset_baseline(spec, load_dataset(spec))
        print(f"mse,{mse!r}\nssim,{ssim!r}")
        return EXIT_OK

    if args.command == "attack":
        spec = _spec(args, RUN_KEYS, images=1)
        report = run_bench(spec, picks=[args.index])
    elif args.command == "bench":
        report = run_bench(_spec(args, RUN_KEYS))
    else:
        report = run_sweep(_spec(args, SWEEP_KEYS))
        for row in report.sweep:
            print(",".join(row))
    _print_report(report)
    if report.spec.out:
        print(f"wrote {report.spec.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
