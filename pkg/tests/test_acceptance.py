"""The ten release criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together in
the pytest terminal summary under "acceptance criteria".
"""

import csv
import math
import struct
import time

import numpy as np
from scipy import stats

from dlglab import harness
from dlglab.attack import AttackConfig, MeasureConfig, distance_eucl, distance_gauss, init_dummy, \
    lambda_adaptive, reconstruct
from dlglab.data import encode_pgm, parse_idx, parse_pgm
from dlglab.errors import FormatError
from dlglab.gradcheck import check_attack_path, check_primitives
from dlglab.metrics import mse, ssim
from dlglab.models import build_model, load_checkpoint, one_hot, victim_gradients
from dlglab.optim import LBFGS, AdamW
from dlglab.rng import Rng


def test_criterion_01_differentiation_oracle(criterion):
    with criterion(1, "differentiation oracle (primitives + attack path, orders 1 and 2)") as c:
        t0 = time.process_time()
        prim = check_primitives(seed=0, instances=20)
        path = check_attack_path(seed=0, instances=20)
        cpu = time.process_time() - t0
        results = prim.results + path.results
        c.check(prim.passed, f"primitive checks {sum(r.passed for r in prim.results)}/{len(prim.results)}")
        c.check(path.passed, f"attack-path checks {sum(r.passed for r in path.results)}/{len(path.results)}")
        c.check({r.order for r in results} == {1, 2}, "both orders exercised")
        c.check(all(r.instances == 20 for r in results), "20 instances each")
        c.check(cpu < 120, f"cpu {cpu:.1f}s < 120s")


def _two_pass_var(v):
    m = sum(v) / len(v)
    return sum((x - m) ** 2 for x in v) / len(v)


def test_criterion_02_measure_correctness(criterion):
    with criterion(2, "distance measures against oracles") as c:
        rng = Rng(2)
        worst = 0.0
        for _ in range(20):
            shapes = [(3, 5), (5,), (2, 3, 3)]
            a = [rng.standard_normal(s) for s in shapes]
            b = [rng.standard_normal(s) for s in shapes]
            d = np.concatenate([x.ravel() for x in a]) - np.concatenate([x.ravel() for x in b])
            worst = max(worst, abs(float(distance_eucl(a, b).value) - float(np.sum(d * d))))
        c.check(worst <= 1e-12, f"eucl max err {worst:.1e}")
        worst = 0.0
        for _ in range(20):
            delta = rng.standard_normal(7)
            lam = float(delta @ delta)
            got = float(distance_gauss([delta], [np.zeros(7)], [lam], [1.0]).value)
            worst = max(worst, abs(got - (1 - math.exp(-1))))
        c.check(worst <= 1e-12, f"gauss at |d|^2=lambda2 max err {worst:.1e}")
        worst = 0.0
        for n in (1, 2, 10, 1000):
            g = rng.standard_normal(n) * 1e-3 + 0.01
            ref = max(n * _two_pass_var(list(g)), 1e-12)
            worst = max(worst, abs(lambda_adaptive(g) - ref) / ref)
        c.check(worst <= 1e-12, f"lambda_adaptive max rel err {worst:.1e}")


def _naive_metrics(a, b, c1=1e-4, c2=9e-4):
    h, w = a.shape
    xs = [a[i][j] for i in range(h) for j in range(w)]
    ys = [b[i][j] for i in range(h) for j in range(w)]
    m = len(xs)
    e = sum((x - y) ** 2 for x, y in zip(xs, ys)) / m
    mx, my = sum(xs) / m, sum(ys) / m
    vx = sum((x - mx) ** 2 for x in xs) / m
    vy = sum((y - my) ** 2 for y in ys) / m
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / m
    s = (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return e, s


def test_criterion_03_metric_oracles(criterion):
    with criterion(3, "metric oracle equivalence") as c:
        rng = Rng(3)
        em = es = 0.0
        for _ in range(50):
            a, b = rng.uniform01((8, 8)), rng.uniform01((8, 8))
            e, s = _naive_metrics(a, b)
            em, es = max(em, abs(mse(a, b) - e)), max(es, abs(ssim(a, b) - s))
        c.check(em <= 1e-12, f"mse max err {em:.1e}")
        c.check(es <= 1e-12, f"ssim max err {es:.1e}")
        self_ok = range_ok = True
        for _ in range(500):
            a = np.clip(rng.standard_normal((1, 6, 6)) * 0.7 + 0.5, 0, 1)
            b = np.clip(rng.standard_normal((1, 6, 6)) * 0.7 + 0.5, 0, 1)
            self_ok &= ssim(a, a) == 1.0
            range_ok &= 0.0 <= mse(a, b) <= 1.0
        c.check(self_ok, "ssim(a,a)=1 on fuzzed inputs")
        c.check(range_ok, "mse in [0,1] on fuzzed inputs")


def test_criterion_04_fixed_point(criterion):
    with criterion(4, "dummy at the true example is a fixed point") as c:
        rng = Rng(4)
        model = build_model("lenet5", (1, 16, 16), 5, rng)
        x = rng.uniform01((1, 16, 16))
        label = 3
        target = victim_gradients(model, x, one_hot(label, 5))
        # margin large enough that softmax is exactly one-hot in float64
        y_logits = np.where(np.arange(5) == label, 1000.0, 0.0)
        for measure in (MeasureConfig("eucl"), MeasureConfig("gauss", lambda2=200.0), MeasureConfig("ag")):
            for opt in ("lbfgs", "adamw"):
                cfg = AttackConfig(measure=measure, optimizer=opt, lr=0.1, iterations=3)
                tr = reconstruct(model, target, cfg, ground_truth=x, x_init=x, y_init=y_logits)
                tag = f"{measure.label}/{opt}"
                c.check(tr.records[0].loss <= 1e-20, f"{tag} L_G@1={tr.records[0].loss:.1e}")
                c.check(tr.x_final.tobytes() == x.tobytes() and tr.y_final.tobytes() == y_logits.tobytes(),
                        f"{tag} no movement")
                c.check(tr.converged, f"{tag} converged")


def test_criterion_05_end_to_end(criterion):
    with criterion(5, "end-to-end reconstruction, 10 binary_strokes images, mlp") as c:
        t0 = time.process_time()
        spec = harness.parse_config(
            "dataset=synth:binary_strokes\narch=mlp\nsize=16\nimages=10\nseed=0\n"
            "init=tg\nmeasure=eucl\noptimizer=lbfgs\nlr=0.1\niters=300\n")
        ds = harness.load_dataset(spec)
        report = harness.run_bench(spec, ds, write=False)
        cpu = time.process_time() - t0
        finals = [r.final_mse for r in report.results]
        good = sum(1 for v in finals if v < 1e-2)
        label = spec.configs[0].label
        mean_conv = report.converged_mean(label, "final_mse")
        base_mse, _ = report.baseline
        c.check(len(finals) == 10, "10 runs")
        c.check(good >= 8, f"{good}/10 runs with final MSE < 1e-2")
        c.check(mean_conv < base_mse, f"mean converged MSE {mean_conv:.2e} < baseline {base_mse:.3f}")
        c.check(cpu < 300, f"cpu {cpu:.1f}s < 300s")


def test_criterion_06_underflow(criterion):
    with criterion(6, "lambda2=1e-30 freezes the dummy (underflow regime)") as c:
        spec = harness.parse_config(
            "dataset=synth:binary_strokes\narch=mlp\nsize=16\nimages=5\nseed=6\n"
            "init=tg,unif\noptimizer=lbfgs\nlr=0.1\niters=50\nlambda2_grid=1e-30\n",
            required=harness.SWEEP_KEYS)
        report = harness.run_sweep(spec, write=False)
        for init in ("tg", "unif"):
            label = AttackConfig(init=init, measure=MeasureConfig("gauss", lambda2=1e-30)).label
            runs = [r for r in report.results if r.config == label]
            frozen = all(r.trace.x_final.tobytes() == r.trace.x_init.tobytes() for r in runs)
            c.check(len(runs) == 5 and report.nnc[label] == 5, f"{init} NNC {report.nnc[label]}/{len(runs)}")
            c.check(frozen, f"{init} dummy bitwise unchanged")


def test_criterion_07_init_contract(criterion):
    with criterion(7, "initialization endpoints and TG vs Unif distribution") as c:
        rng = Rng(7)
        for scheme in ("tg", "unif"):
            ok = True
            for _ in range(1000):
                x, y = init_dummy((1, 8, 8), 10, scheme, rng)
                for t in (x, y):
                    ok &= t.min() == 0.0 and t.max() == 1.0 and bool(np.all((t >= 0) & (t <= 1)))
            c.check(ok, f"{scheme}: 1000 draws attain 0 and 1, stay in [0,1]")
        tg, _ = init_dummy((10_000,), 2, "tg", Rng(70))
        un, _ = init_dummy((10_000,), 2, "unif", Rng(71))
        ks = stats.ks_2samp(tg, un).statistic
        c.check(ks > 0.1, f"KS {ks:.3f} > 0.1")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_08_determinism_and_accounting(criterion, tmp_path):
    with criterion(8, "byte determinism, curve recomputation, NNC accounting") as c:
        bench = ("dataset=synth:gaussian_blobs\narch=mlp\nsize=8\nhidden=16\nimages=4\nseed=8\n"
                 "init=tg,unif\nmeasure=eucl,ag\noptimizer=lbfgs\nlr=0.1,1\niters=40\n")
        sweep = ("dataset=synth:binary_strokes\narch=mlp\nsize=8\nhidden=16\nimages=3\nseed=8\n"
                 "init=tg,unif\noptimizer=lbfgs\nlr=0.1\niters=20\nlambda2_grid=1e-30,50,ag\n")
        for run in ("a", "b"):
            harness.run_bench(harness.parse_config(bench, {"out": str(tmp_path / run)}))
            harness.run_sweep(harness.parse_config(sweep, {"out": str(tmp_path / f"s{run}")},
                                                   required=harness.SWEEP_KEYS))
        for name in ("trace.csv", "summary.csv"):
            c.check((tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), f"{name} identical")
        c.check((tmp_path / "sa" / "sweep.csv").read_bytes() == (tmp_path / "sb" / "sweep.csv").read_bytes(),
                "sweep.csv identical")

        for out in (tmp_path / "a", tmp_path / "sa"):
            summary = _rows(out / "summary.csv")
            keep = {(r["config"], r["image"]) for r in summary if r["converged"] == "true"}
            acc = {}
            for r in _rows(out / "trace.csv"):
                if (r["config"], r["image"]) in keep:
                    a = acc.setdefault((r["config"], int(r["iter"])), [0, 0.0, 0.0, 0.0])
                    a[0] += 1
                    a[1] += float(r["loss"])
                    a[2] += float(r["mse"])
                    a[3] += float(r["ssim"])
            worst = 0.0
            curves = _rows(out / "curves.csv")
            for r in curves:
                n, lo, ms, ss = acc[(r["config"], int(r["iter"]))]
                worst = max(worst, abs(float(r["loss"]) - lo / n), abs(float(r["mse"]) - ms / n),
                            abs(float(r["ssim"]) - ss / n))
            c.check(len(curves) == len(acc) and worst <= 1e-12, f"{out.name}: curves recomputed, max err {worst:.1e}")

        summary = _rows(tmp_path / "a" / "summary.csv")
        table = list(csv.reader(open(tmp_path / "a" / "nnc.csv")))
        header, body = table[0], table[1:]
        mismatch = 0
        for row in body:
            init = {"TG": "tg", "Unif": "unif"}[row[0]]
            for col, cell in zip(header[1:], row[1:]):
                opt, lr, measure = col.split(" ")
                label = f"{init}-{measure}-{opt}-lr{lr.split('=')[1]}"
                count = sum(1 for r in summary if r["config"] == label and r["converged"] == "false")
                mismatch += int(cell) != count
        c.check(mismatch == 0 and len(body) * (len(header) - 1) == 8, "NNC table equals converged=false counts")
        ssum = _rows(tmp_path / "sa" / "summary.csv")
        sweep_rows = list(csv.reader(open(tmp_path / "sa" / "sweep.csv")))
        nnc_tg = [row for row in sweep_rows if row[:2] == ["NNC", "TG"]][0]
        label = "tg-gauss1e-30-lbfgs-lr0.1"
        c.check(int(nnc_tg[2]) == sum(1 for r in ssum if r["config"] == label and r["converged"] == "false"),
                "sweep NNC equals converged=false count")


def test_criterion_09_optimizers(criterion):
    with criterion(9, "optimizer checks") as c:
        a = np.diag([1.0, 10.0])
        opt, x = LBFGS(1.0), np.array([4.0, -3.0])
        steps = 0
        while np.linalg.norm(a @ x) >= 1e-8 and steps < 25:
            x = opt.step(x, a @ x)
            steps += 1
        c.check(np.linalg.norm(a @ x) < 1e-8, f"quadratic |g| {np.linalg.norm(a @ x):.1e} after {steps} steps")
        x0, g0 = np.array([0.3, -1.2, 5.0]), np.array([1.5, 0.25, -2.0])
        c.check(np.array_equal(LBFGS(0.1).step(x0, g0), x0 - 0.1 * g0), "first step is -lr*g exactly")
        ad = AdamW(0.001)
        x1 = ad.step(np.array([2.0]), np.array([1.0]))
        hand = 2.0 - 0.001 * ((0.1 * 1.0) / (1 - 0.9)) / (math.sqrt((0.001 * 1.0) / (1 - 0.999)) + 1e-8)
        c.check(abs(x1[0] - hand) <= 1e-12, f"adamw step err {abs(x1[0] - hand):.1e}")
        ad = AdamW(0.01)
        xs = np.array([0.7, -0.2])
        fixed = all(np.array_equal(ad.step(xs, np.zeros(2)), xs) for _ in range(3))
        c.check(fixed, "adamw fixes g=0 points")


def test_criterion_10_io(criterion, tmp_path):
    with criterion(10, "IDX and PGM round trips, malformed files") as c:
        img = struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 128, 255, 64])
        lab = struct.pack(">II", 0x801, 1) + bytes([7])
        ds = parse_idx(img, lab)
        c.check(ds.images[0].ravel().tolist() == [0.0, 128 / 255, 1.0, 64 / 255] and ds.labels == (7,),
                "IDX fixture decodes exactly")
        rng = Rng(10)
        worst = 0.0
        for k in range(50):
            im = rng.uniform01((4 + k % 5, 3 + k % 7))
            worst = max(worst, float(np.max(np.abs(parse_pgm(encode_pgm(im)) - im))))
        c.check(worst <= 1 / 255, f"PGM round trip max err {worst:.4f} <= 1/255")
        blobs = [b"", b"P5", b"P5\n2 2\n255\n\x00", b"P2\n2 2\n255\n1 2 3", b"P7\n1 1\n255\n\x00",
                 b"P5\n-1 2\n255\n", b"P5\n1 1\n0\n\x00", b"P2\n1 1\n255\n999"]
        blobs += [bytes(rng.integers(256, size=n).astype(np.uint8)) for n in range(1, 60)]
        crashes = 0
        for blob in blobs:
            for parse in (lambda b: parse_pgm(b), lambda b: parse_idx(b, lab), lambda b: parse_idx(img, b),
                          lambda b: parse_pgm(b"P5\n" + b)):
                try:
                    parse(blob)
                except FormatError:
                    pass
                except Exception:
                    crashes += 1
            (tmp_path / "ck").write_bytes(b"GLKW" + blob)
            try:
                load_checkpoint(tmp_path / "ck")
            except FormatError:
                pass
            except Exception:
                crashes += 1
        c.check(crashes == 0, f"{len(blobs)} malformed inputs, {crashes} unstructured failures")
