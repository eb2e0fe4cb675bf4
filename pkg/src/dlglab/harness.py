"""Experiment driver: config parsing, seeded benches, lambda2 sweeps, CSV output."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attack import INIT_SCHEMES, MEASURES, OPTIMIZERS, AttackConfig, AttackTrace, MeasureConfig, \
    reconstruct
from .data import SYNTH_KINDS, Dataset, load_idx, load_pgm_dir, save_pgm, synth
from .errors import ConfigError
from .metrics import random_image_baseline
from .models import ARCHS, Model, build_model, one_hot, victim_gradients
from .rng import Rng, mix64

log = logging.getLogger(__name__)

DEFAULT_GRID = (50.0, 100.0, 150.0, 200.0, 500.0, 800.0, 1000.0, 1500.0, "ag")
EXTENDED_GRID = (1.0, 50.0, 100.0, 150.0, 200.0, 500.0, 800.0, 1000.0, 1500.0, 2000.0, "ag")
SCHEME_NAMES = {"tg": "TG", "unif": "Unif"}

# salts for the streams derived from the master seed
_SALT_MODEL = 0x6D6F64656C
_SALT_SHUFFLE = 0x73687566
_SALT_DATA = 0x64617461
_SALT_BASELINE = 0x62617365

TRACE_HEADER = ("config", "image", "iter", "loss", "mse", "ssim")
SUMMARY_HEADER = ("config", "image", "converged", "final_mse", "final_ssim", "iters", "wallclock_ms")
CURVE_HEADER = ("config", "iter", "runs", "loss", "mse", "ssim")


# ---------------------------------------------------------------------------
# spec and config parsing


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str = "synth:binary_strokes"
    arch: str = "mlp"
    size: int = 16
    channels: int = 1
    classes: int | None = None
    hidden: tuple[int, ...] = (64,)
    inits: tuple[str, ...] = ("tg",)
    measures: tuple[MeasureConfig, ...] = (MeasureConfig("eucl"),)
    optimizers: tuple[str, ...] = ("lbfgs",)
    lrs: tuple[float, ...] = (0.1,)
    iterations: int = 100
    tau: float = 0.1
    weight_decay: float = 0.0
    history: int = 20
    images: int = 100
    seed: int = 0
    out: str | None = None
    lambda2_grid: tuple = DEFAULT_GRID
    workers: int = 1
    timing: bool = False
    dumps: bool = True
    baseline_trials: int = 1000

    def __post_init__(self) -> None:
        if self.images < 1:
            raise ConfigError(f"images must be >= 1, got {self.images}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; accepted values {{{', '.join(ARCHS)}}}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        # builds (and so validates) every config
        if not self.configs:
            raise ConfigError("experiment needs at least one attack config")

    @property
    def configs(self) -> tuple[AttackConfig, ...]:
        return tuple(
            AttackConfig(init=i, measure=m, optimizer=o, lr=lr, iterations=self.iterations,
                         tau=self.tau, weight_decay=self.weight_decay, history=self.history)
            for i, m, o, lr in itertools.product(self.inits, self.measures, self.optimizers, self.lrs)
        )


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(t) for t in v.split(",") if t.strip())


def _words(v: str) -> tuple[str, ...]:
    return tuple(t.strip().lower() for t in v.split(",") if t.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(t) for t in v.split(",") if t.strip())


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _grid(v: str) -> tuple:
    s = v.strip().lower()
    if s == "default":
        return DEFAULT_GRID
    if s == "extended":
        return EXTENDED_GRID
    return tuple("ag" if t == "ag" else float(t) for t in _words(v))


KEYS = {
    "dataset": str.strip,
    "arch": lambda v: v.strip().lower(),
    "size": int,
    "channels": int,
    "classes": int,
    "hidden": _ints,
    "init": _words,
    "measure": _words,
    "lambda2": _floats,
    "optimizer": _words,
    "lr": _floats,
    "iters": int,
    "tau": float,
    "weight_decay": float,
    "history": int,
    "images": int,
    "seed": int,
    "out": str.strip,
    "lambda2_grid": _grid,
    "workers": int,
    "timing": _bool,
    "dumps": _bool,
    "baseline_trials": int,
}
_LIST_KEYS = ("init", "measure", "lambda2", "optimizer", "lr", "hidden", "lambda2_grid")
RUN_KEYS = ("init", "measure", "optimizer", "lr", "iters")
SWEEP_KEYS = ("init", "optimizer", "lr", "iters")


def _parse_lines(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    return raw


def _check_enum(name: str, values: Iterable[str], accepted: Sequence[str]) -> None:
    for v in values:
        if v not in accepted:
            raise ConfigError(f"unknown {name} {v!r}; accepted values {{{', '.join(accepted)}}}")


def parse_config(text: str | bytes = "", overrides: Mapping[str, object] | None = None,
                 required: Sequence[str] = RUN_KEYS) -> ExperimentSpec:
    """Build a validated spec from ``key=value`` lines; ``overrides`` win.

    Override values may be strings (as from a command line) or already typed.
    ``None`` overrides are ignored.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"config is not UTF-8: {exc}") from None
    raw: dict[str, object] = dict(_parse_lines(text))
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; accepted: {', '.join(sorted(KEYS))}")
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")

    vals: dict[str, object] = {}
    for k, v in raw.items():
        if isinstance(v, str):
            try:
                vals[k] = KEYS[k](v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from None
        elif k in _LIST_KEYS:
            vals[k] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        else:
            vals[k] = v

    kw: dict[str, object] = {}
    if "init" in vals:
        _check_enum("init", vals["init"], tuple(INIT_SCHEMES))
        kw["inits"] = vals["init"]
    if "optimizer" in vals:
        _check_enum("optimizer", vals["optimizer"], OPTIMIZERS)
        kw["optimizers"] = vals["optimizer"]
    if "lr" in vals:
        for lr in vals["lr"]:
            if not lr > 0 or not math.isfinite(lr):
                raise ConfigError(f"learning rate must be a finite value > 0, got {lr}")
        kw["lrs"] = vals["lr"]
    if "iters" in vals:
        if vals["iters"] < 1:
            raise ConfigError(f"iters must be >= 1, got {vals['iters']}")
        kw["iterations"] = vals["iters"]
    if "measure" in vals:
        _check_enum("measure", vals["measure"], MEASURES)
        lams = vals.get("lambda2", ())
        measures = []
        for m in vals["measure"]:
            if m == "gauss":
                if not lams:
                    raise ConfigError("measure gauss needs lambda2")
                measures.extend(MeasureConfig("gauss", lambda2=lam) for lam in lams)
            else:
                measures.append(MeasureConfig(m))
        kw["measures"] = tuple(measures)
    if "lambda2_grid" in vals:
        for g in vals["lambda2_grid"]:
            if g != "ag" and not (g > 0):
                raise ConfigError(f"lambda2 grid values must be > 0 or 'ag', got {g}")
        kw["lambda2_grid"] = vals["lambda2_grid"]
    for k in ("dataset", "arch", "size", "channels", "classes", "hidden", "tau", "weight_decay",
              "history", "images", "seed", "out", "workers", "timing", "dumps", "baseline_trials"):
        if k in vals:
            kw[k] = vals[k]
    if "images" not in kw:
        kw["images"] = 20 if kw.get("arch") == "tiny_resnet" else 100
    if "tau" in kw and not kw["tau"] > 0:
        raise ConfigError(f"tau must be > 0, got {kw['tau']}")
    return ExperimentSpec(**kw)


# ---------------------------------------------------------------------------
# dataset and model resolution


def load_dataset(spec: ExperimentSpec) -> Dataset:
    """Resolve ``synth:<kind>``, ``idx:<images>,<labels>`` or ``pgm:<dir>``."""
    kind, _, arg = spec.dataset.partition(":")
    if kind == "synth":
        if arg not in SYNTH_KINDS:
            raise ConfigError(f"unknown synthetic family {arg!r}; accepted values {{{', '.join(SYNTH_KINDS)}}}")
        n = max(spec.images, 2)
        rng = Rng(mix64(spec.seed, _SALT_DATA))
        return synth(arg, (spec.channels, spec.size, spec.size), n, spec.classes or 10, rng)
    if kind == "idx":
        parts = arg.split(",")
        if len(parts) != 2:
            raise ConfigError("idx dataset needs idx:<images-file>,<labels-file>")
        return load_idx(parts[0], parts[1])
    if kind == "pgm":
        ds = load_pgm_dir(arg, spec.classes)
        if not len(ds):
            raise ConfigError(f"no .pgm files in {arg}")
        return ds
    raise ConfigError(f"unknown dataset reference {spec.dataset!r}; use synth:, idx: or pgm:")


def select_images(spec: ExperimentSpec, ds: Dataset) -> list[int]:
    """Indices of the first ``spec.images`` entries after a seeded shuffle."""
    if len(ds) < spec.images:
        raise ConfigError(f"dataset has {len(ds)} images, {spec.images} requested")
    order = Rng(mix64(spec.seed, _SALT_SHUFFLE)).permutation(len(ds))
    return [int(i) for i in order[: spec.images]]


def make_model(spec: ExperimentSpec, ds: Dataset) -> Model:
    classes = max(spec.classes or ds.classes, ds.classes)
    return build_model(spec.arch, ds.shape, classes, Rng(mix64(spec.seed, _SALT_MODEL)), hidden=spec.hidden)


def run_seed(master: int, config_index: int, image_index: int) -> int:
    return mix64(master, config_index, image_index)


# ---------------------------------------------------------------------------
# single runs


@dataclass
class RunResult:
    config_index: int
    config: str
    image: int
    trace: AttackTrace | None
    converged: bool
    final_mse: float
    final_ssim: float
    iters: int
    wallclock_ms: float
    error: str = ""


def _run(task) -> RunResult:
    model, cfg, ci, image_index, x, label = task
    try:
        target = victim_gradients(model, x, one_hot(label, model.classes))
        trace = reconstruct(model, target, cfg, ground_truth=x)
    except Exception as exc:  # one broken run must not take the bench down
        log.warning("run %s image %d failed: %s", cfg.label, image_index, exc)
        return RunResult(ci, cfg.label, image_index, None, False, math.nan, math.nan, 0, 0.0,
                         f"{type(exc).__name__}: {exc}")
    if trace.reason:
        log.info("run %s image %d aborted: %s", cfg.label, image_index, trace.reason)
    return RunResult(ci, cfg.label, image_index, trace, trace.converged, trace.final_mse,
                     trace.final_ssim, trace.iterations, trace.wallclock * 1000.0, trace.reason)


def _tasks(spec: ExperimentSpec, model: Model, ds: Dataset, picks: Sequence[int]):
    for ci, cfg in enumerate(spec.configs):
        for ii in picks:
            seeded = replace(cfg, seed=run_seed(spec.seed, ci, ii))
            yield (model, seeded, ci, ii, np.asarray(ds.images[ii]), ds.labels[ii])


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class Curve:
    iters: np.ndarray
    runs: int
    loss: np.ndarray
    mse: np.ndarray
    ssim: np.ndarray


def mean_curve(traces: Sequence[AttackTrace]) -> Curve:
    """Per-iteration means over the given (converged) traces."""
    if not traces:
        empty = np.zeros(0)
        return Curve(empty.astype(int), 0, empty, empty, empty)
    n = min(t.iterations for t in traces)
    cols = {k: np.array([[getattr(r, k) for r in t.records[:n]] for t in traces]) for k in ("loss", "mse", "ssim")}
    return Curve(np.arange(1, n + 1), len(traces), cols["loss"].mean(axis=0), cols["mse"].mean(axis=0),
                 cols["ssim"].mean(axis=0))


@dataclass
class RunReport:
    spec: ExperimentSpec
    results: list[RunResult]
    baseline: tuple[float, float]
    curves: dict[str, Curve] = field(default_factory=dict)
    nnc: dict[str, int] = field(default_factory=dict)
    sweep: list[list[str]] | None = None

    def converged_mean(self, config: str, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.results if r.config == config and r.converged]
        return float(np.mean(vals)) if vals else math.nan


def aggregate(results: Sequence[RunResult], labels: Sequence[str]) -> tuple[dict[str, Curve], dict[str, int]]:
    curves, nnc = {}, {}
    for label in labels:
        rows = [r for r in results if r.config == label]
        nnc[label] = sum(1 for r in rows if not r.converged)
        curves[label] = mean_curve([r.trace for r in rows if r.converged])
    return curves, nnc


def dataset_baseline(spec: ExperimentSpec, ds: Dataset) -> tuple[float, float]:
    return random_image_baseline(ds.images, spec.baseline_trials, Rng(mix64(spec.seed, _SALT_BASELINE)))


# ---------------------------------------------------------------------------
# CSV writing


def _f(v: float) -> str:
    return repr(float(v))


def _csv(rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def trace_rows(results: Sequence[RunResult]):
    yield TRACE_HEADER
    for r in results:
        if r.trace is None:
            continue
        for rec in r.trace.records:
            yield (r.config, r.image, rec.iter, _f(rec.loss), _f(rec.mse), _f(rec.ssim))


def summary_rows(results: Sequence[RunResult], timing: bool):
    yield SUMMARY_HEADER
    for r in results:
        wall = _f(r.wallclock_ms) if timing else "0"
        yield (r.config, r.image, "true" if r.converged else "false", _f(r.final_mse), _f(r.final_ssim),
               r.iters, wall)


def curve_rows(curves: Mapping[str, Curve]):
    yield CURVE_HEADER
    for label, c in curves.items():
        for k, it in enumerate(c.iters):
            yield (label, int(it), c.runs, _f(c.loss[k]), _f(c.mse[k]), _f(c.ssim[k]))


def nnc_rows(spec: ExperimentSpec, nnc: Mapping[str, int]):
    """Rows per init scheme, columns per (optimizer, lr, measure)."""
    cols = [(o, lr, m) for o in spec.optimizers for lr in spec.lrs for m in spec.measures]
    yield ("init", *(f"{o} lr={lr:g} {m.label}" for o, lr, m in cols))
    for init in spec.inits:
        cells = []
        for o, lr, m in cols:
            label = AttackConfig(init=init, measure=m, optimizer=o, lr=lr).label
            cells.append(nnc[label])
        yield (SCHEME_NAMES[init], *cells)


def write_report(report: RunReport, out: str | os.PathLike) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = report.spec
    (out / "trace.csv").write_text(_csv(trace_rows(report.results)))
    (out / "summary.csv").write_text(_csv(summary_rows(report.results, spec.timing)))
    (out / "curves.csv").write_text(_csv(curve_rows(report.curves)))
    (out / "nnc.csv").write_text(_csv(nnc_rows(spec, report.nnc)))
    (out / "baseline.csv").write_text(_csv([("metric", "value"), ("mse", _f(report.baseline[0])),
                                            ("ssim", _f(report.baseline[1]))]))
    if report.sweep is not None:
        (out / "sweep.csv").write_text(_csv(report.sweep))
    if spec.dumps:
        for r in report.results:
            if r.trace is None:
                continue
            for it, img in sorted(r.trace.snapshots.items()):
                save_pgm(out / f"recon_{r.config}_{r.image}_{it}.pgm", img)
    return out


# ---------------------------------------------------------------------------
# entry points


def _execute(spec: ExperimentSpec, tasks: list) -> list[RunResult]:
    if spec.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run, tasks))
    else:
        results = [_run(t) for t in tasks]
    results.sort(key=lambda r: (r.config_index, r.image))
    return results


def run_bench(spec: ExperimentSpec, dataset: Dataset | None = None, write: bool = True,
              picks: Sequence[int] | None = None) -> RunReport:
    """Every config on every selected image; ``picks`` overrides the seeded selection."""
    ds = dataset if dataset is not None else load_dataset(spec)
    if picks is None:
        picks = select_images(spec, ds)
    elif any(not 0 <= i < len(ds) for i in picks):
        raise ConfigError(f"image index outside dataset of {len(ds)} images")
    model = make_model(spec, ds)
    results = _execute(spec, list(_tasks(spec, model, ds, picks)))
    labels = [c.label for c in spec.configs]
    curves, nnc = aggregate(results, labels)
    report = RunReport(spec, results, dataset_baseline(spec, ds), curves, nnc)
    if write and spec.out:
        write_report(report, spec.out)
    return report


def grid_measures(grid: Sequence) -> tuple[MeasureConfig, ...]:
    return tuple(MeasureConfig("ag") if g == "ag" else MeasureConfig("gauss", lambda2=float(g)) for g in grid)


def _grid_label(g) -> str:
    return "AG" if g == "ag" else f"{float(g):g}"


def sweep_table(report: RunReport, grid: Sequence) -> list[list[str]]:
    """Rows MSE/SSIM/NNC x scheme, one column per grid entry; N/A when no run converged."""
    spec = report.spec
    o, lr = spec.optimizers[0], spec.lrs[0]
    table = [["metric", "scheme", *(_grid_label(g) for g in grid)]]
    for metric in ("MSE", "SSIM", "NNC"):
        for init in spec.inits:
            row = [metric, SCHEME_NAMES[init]]
            for m in grid_measures(grid):
                label = AttackConfig(init=init, measure=m, optimizer=o, lr=lr).label
                if metric == "NNC":
                    row.append(str(report.nnc[label]))
                else:
                    v = report.converged_mean(label, "final_mse" if metric == "MSE" else "final_ssim")
                    row.append("N/A" if math.isnan(v) else _f(v))
            table.append(row)
    return table


def run_sweep(spec: ExperimentSpec, dataset: Dataset | None = None, write: bool = True) -> RunReport:
    """One bench per grid entry per init scheme (first optimizer and lr of the experiment)."""
    grid = tuple(dict.fromkeys(spec.lambda2_grid))
    swept = replace(spec, measures=grid_measures(grid), optimizers=spec.optimizers[:1], lrs=spec.lrs[:1])
    report = run_bench(swept, dataset, write=False)
    report.sweep = sweep_table(report, grid)
    if write and spec.out:
        write_report(report, spec.out)
    return report
