"""Acceptance gate: one test per headline criterion, each reported PASS/FAIL."""

import itertools
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, special

from cfstress import _kernels as K
from cfstress import classify as C
from cfstress import imaging as I
from cfstress import metrics as X
from cfstress import scmworld as W
from cfstress.harness import cli
from cfstress.harness import config as H
from cfstress.harness.run import run_experiment

from conftest import criterion

# ---------------------------------------------------------------------------
# brute-force oracles


def ap_oracle(labels, scores):
    # mean over positives of precision at the end of the positive's tie block
    pos = [i for i, y in enumerate(labels) if y == 1]
    total = Fraction(0)
    for i in pos:
        above = [j for j in range(len(scores)) if scores[j] >= scores[i]]
        total += Fraction(sum(labels[j] for j in above), len(above))
    return total / len(pos)


def auc_oracle(labels, scores):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else 0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def pair_oracle(x, y):
    c = d = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        tx += dx == 0
        ty += dy == 0
        if dx * dy > 0:
            c += 1
        elif dx * dy < 0:
            d += 1
    return c, d, tx, ty


def t_two_sided_oracle(r, n):
    df = n - 2
    t = abs(r) * math.sqrt(df / (1 - r * r))
    logc = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * math.log(df * math.pi)

    def density(u):
        return math.exp(logc - (df + 1) / 2 * math.log1p(u * u / df))

    tail, _ = integrate.quad(density, t, math.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
    return 2 * tail


# ---------------------------------------------------------------------------
# criteria


def test_metric_oracles():
    with criterion("metric oracles (AP, AUC, macro AUC, Kendall counts) vs brute force, 200 instances"):
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(4, 51))
            k = int(rng.integers(2, 5))
            labels = rng.integers(0, k, n)
            labels[:k] = np.arange(k)  # every class present
            grid = int(rng.integers(3, 12))  # coarse scores force ties
            scores = rng.integers(0, grid, (n, k)).astype(float) / grid
            binary = (labels == 1).astype(int)
            binary[0] = 0
            s1 = scores[:, 1]
            worst = max(worst, abs(X.average_precision(binary, s1) - float(ap_oracle(list(binary), list(s1)))))
            worst = max(worst, abs(X.roc_auc_binary(binary, s1) - float(auc_oracle(list(binary), list(s1)))))
            macro = np.mean([float(auc_oracle(list((labels == c).astype(int)), list(scores[:, c])))
                             for c in range(k)])
            worst = max(worst, abs(X.macro_ovr_auc(labels, scores) - macro))
            x, y = rng.integers(0, 6, n).astype(float), rng.integers(0, 6, n).astype(float)
            want = pair_oracle(x, y)
            for impl in (K.numpy_impl, K.numba_impl):
                assert tuple(impl.pair_counts(x, y)) == want
        elapsed = time.perf_counter() - start
        assert worst <= 1e-12, f"worst deviation {worst:.3g}"
        assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_pearson_p_values():
    with criterion("Pearson p vs Student-t quadrature oracle within 1e-6, 50 instances"):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(5, 41))
            x = rng.normal(size=n)
            y = rng.uniform(-1, 1) * x + rng.normal(size=n)
            r, p = X.pearson_with_p(x, y)
            worst = max(worst, abs(p - t_two_sided_oracle(r, n)))
        assert worst <= 1e-6, f"worst deviation {worst:.3g}"


def test_perturbation_contracts():
    with criterion("perturbation identity, blur impulse response, output range"):
        rng = np.random.default_rng(11)
        img = rng.random((24, 24))
        for spec in (I.PerturbationSpec("GC", gamma=1.0), I.PerturbationSpec("CC", contrast_factor=1.0),
                     I.PerturbationSpec("BC", brightness_factor=1.0), I.PerturbationSpec("SC", sharpness_factor=1.0),
                     I.PerturbationSpec("GB", kernel_size=1, sigma=1.0)):
            assert np.array_equal(I.perturb_array(img, spec), img), spec.kind
        for ksize, sigma in ((3, 0.8), (7, 1.5), (11, 2.5)):
            impulse = np.zeros((21, 21))
            impulse[10, 10] = 1.0
            half = ksize // 2
            w = np.exp(-np.arange(-half, half + 1) ** 2 / (2 * sigma ** 2))
            w /= w.sum()
            want = np.zeros((21, 21))
            want[10 - half:10 + half + 1, 10 - half:10 + half + 1] = np.outer(w, w)
            got = I.perturb_array(impulse, I.PerturbationSpec("GB", kernel_size=ksize, sigma=sigma))
            assert np.max(np.abs(got - want)) <= 1e-12
        for _ in range(100):
            a = rng.random(tuple(rng.integers(1, 40, 2)))
            for spec in I.default_suite():
                out = I.perturb_array(a, spec)
                assert out.min() >= 0.0 and out.max() <= 1.0


def test_counterfactual_axioms():
    with criterion("counterfactual composition, reversibility, effectiveness on 100 records (noise 0)"):
        cfg = W.WorldConfig(noise_floor=0.0, seed=5)
        ws = W.sample_world(cfg, 100)
        size = cfg.image_size
        worst = {"oracle composition": 0.0, "analytic composition": 0.0, "reversibility": 0.0,
                 "effectiveness": 0.0}
        for r, x in zip(ws.manifest.records, ws.images):
            u = ws.noise[r.image_id]
            other = "B" if r.scanner == "A" else "A"
            a = W.render_anatomy_array(u, cfg.aspect(r.sex), bool(r.label), size)
            raw = {s.name: a ** s.exponent + s.bias * W.bias_field(size) for s in cfg.scanners}
            ok = np.all([(v > 0) & (v < 1) for v in raw.values()], axis=0)  # unclamped pixels
            same = W.counterfactual_oracle(r, u, {"scanner": r.scanner, "sex": r.sex}, cfg)
            worst["oracle composition"] = max(worst["oracle composition"],
                                              np.max(np.abs(same.twin.data - x)))
            analytic_same = W.counterfactual_scanner_array(x, r.scanner, r.scanner, cfg)
            worst["analytic composition"] = max(worst["analytic composition"],
                                                np.max(np.abs(analytic_same - x)[ok]))
            there = W.counterfactual_scanner_array(x, r.scanner, other, cfg)
            back = W.counterfactual_scanner_array(there, other, r.scanner, cfg)
            worst["reversibility"] = max(worst["reversibility"], np.max(np.abs(back - x)[ok]))
            direct = W.observe_array(u, r.sex, bool(r.label), other, cfg)
            worst["effectiveness"] = max(worst["effectiveness"], np.max(np.abs(there - direct)[ok]))
        assert worst["oracle composition"] <= 1e-12, worst
        assert worst["analytic composition"] <= 1e-9, worst
        assert worst["reversibility"] <= 1e-9, worst
        assert worst["effectiveness"] <= 1e-9, worst


def test_gradient_check():
    with criterion("analytic vs finite-difference gradients, both kinds, 20 batches"):
        rng = np.random.default_rng(3)
        for kind in C.KINDS:
            spec = C.ClassifierSpec(kind=kind, input_side=4, hidden_units=6, class_count=3)
            for _ in range(20):
                w = rng.normal(0, 0.5, spec.n_weights())
                x = rng.normal(size=(int(rng.integers(1, 16)), spec.n_features))
                y = rng.integers(0, 3, len(x))
                _, g = C.loss_and_grad(spec, w, x, y)
                num = np.empty_like(w)
                for i in range(w.size):
                    e = np.zeros_like(w)
                    e[i] = 1e-5
                    num[i] = (C.loss(spec, w + e, x, y) - C.loss(spec, w - e, x, y)) / 2e-5
                rel = np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)
                assert rel <= 1e-4, f"{kind}: relative error {rel:.3g}"


REPLICATION = (Path(__file__).resolve().parents[1] / "configs" / "replication.toml").read_text()


@pytest.fixture(scope="module")
def replication():
    cfg = H.loads(REPLICATION)
    start = time.perf_counter()
    report, _ = run_experiment(cfg)
    return report, time.perf_counter() - start


def test_synthetic_replication(replication):
    report, elapsed = replication
    res = report.shift_results
    ood = {s.pair_key: s.delta_vs_iid for s in res if s.condition == "OOD"}
    cf = {s.pair_key: s.delta_vs_iid for s in res if s.condition == "CF"}
    pooled = {a.method: a for a in report.agreement if a.scope == "pooled"}
    classical = [m for m in pooled if m != "CF"]
    print(f"replication took {elapsed:.0f}s")
    for m, a in pooled.items():
        print(f"{m:>3} MAE {a.mae:.4f}  r {a.pearson_r:+.3f}  n {a.n}")
    with criterion("replication: 4000/2000 images, 2 kinds x 3 seeds, under 10 minutes"):
        # each axis trains on one scanner's share, so the two axes together cover the splits
        n_train = {r["axis"]: r["n_train"] for r in report.runs}
        n_test = {r["axis"]: r["n_iid"] for r in report.runs}
        assert len(report.runs) == 12 and all(a.n == 12 for a in pooled.values())
        assert sum(n_train.values()) == pytest.approx(4000, rel=0.03)
        assert sum(n_test.values()) == pytest.approx(2000, rel=0.03)
        assert elapsed < 600, f"took {elapsed:.0f}s"
    with criterion("replication (a): |dCF - dOOD| <= 0.03 AP in every run"):
        worst = max(abs(cf[k] - ood[k]) for k in ood)
        assert worst <= 0.03, f"worst per-run gap {worst:.4f}"
    with criterion("replication (b): CF mean MAE below every classical perturbation"):
        best = min(classical, key=lambda m: pooled[m].mae)
        assert pooled["CF"].mae < pooled[best].mae, (
            f"CF {pooled['CF'].mae:.4f} vs {best} {pooled[best].mae:.4f}")
    with criterion("replication (c): pooled Pearson r(CF, OOD) above every classical r"):
        rs = [pooled[m].pearson_r for m in classical if not math.isnan(pooled[m].pearson_r)]
        assert pooled["CF"].pearson_r > max(rs), f"CF r {pooled['CF'].pearson_r:.3f} vs {max(rs):.3f}"


DETERMINISM = """
seeds = [0, 1]
split_ratios = [0.6, 0.2, 0.2]

[world]
n_images = 600
image_size = 32
prevalence = 0.5
noise_floor = 0.02

[[axes]]
train = { scanner = "A" }
eval = { scanner = "B" }

[[axes]]
train = { scanner = "A", sex = "M" }
eval = { scanner = "B", sex = "F" }

[[classifiers]]
kind = "logistic"
input_side = 16
learning_rate = 0.001
max_epochs = 30

[[classifiers]]
kind = "mlp"
input_side = 16
hidden_units = 16
learning_rate = 0.001
max_epochs = 30

[matching]
match_age = false
"""


def test_determinism(tmp_path):
    with criterion("determinism: two full runs give byte-identical JSON reports"):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(DETERMINISM)
        for name in ("a", "b"):
            assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "report.json").read_bytes()
        assert a == (tmp_path / "b" / "report.json").read_bytes()
        assert len(json.loads(a)["shift_results"]) > 0


def test_composite_shift(tmp_path):
    with criterion("composite (scanner, sex) shift runs end to end with per-subgroup rows"):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(DETERMINISM)
        out = tmp_path / "out"
        assert cli.main(["run", "--config", str(cfg), "--out", str(out), "--format", "csv"]) == 0
        d = json.loads((out / "report.json").read_text())
        tag = "scanner=A>B,sex=M>F"
        rows = [a for a in d["agreement"] if a["scope"] == tag]
        assert {a["method"] for a in rows} == {"GC", "CC", "BC", "SC", "GB", "CF"}
        assert all(a["n"] == 4 for a in rows)
        header = (out / "agreement_mae.csv").read_text().splitlines()[0]
        assert f'"{tag} mae"' in header
        assert (out / "chart_scanner_A_B_sex_M_F.svg").exists()
