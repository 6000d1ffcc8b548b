import json
import math
import re

import numpy as np
import pytest

from cfstress import metrics as X
from cfstress.errors import ConfigError, DataError, NumericError
from cfstress.harness import cli
from cfstress.harness import config as H
from cfstress.harness.report import bar_chart_data, emit_bar_chart, emit_report, report_from_json
from cfstress.harness.run import RunReport, agreement_rows, run_experiment

SMALL = """
seeds = [0, 1, 2]
split_ratios = [0.6, 0.2, 0.2]

[world]
n_images = 360
image_size = 32
prevalence = 0.5
noise_floor = 0.02

[[axes]]
train = { scanner = "A" }
eval = { scanner = "B" }

[[axes]]
train = { scanner = "B" }
eval = { scanner = "A" }

[[classifiers]]
kind = "logistic"
input_side = 8
learning_rate = 0.01
max_epochs = 8
patience = 3

[[classifiers]]
kind = "mlp"
input_side = 8
hidden_units = 8
learning_rate = 0.01
max_epochs = 8
patience = 3

[matching]
match_age = false
"""


def small(extra="", drop_axes=False, **repl):
    text = SMALL
    for old, new in repl.items():
        text = text.replace(old, new)
    if drop_axes:
        text = text[:text.index("[[axes]]")] + text[text.index("[[classifiers]]"):]
    return H.loads(text + extra)


@pytest.fixture(scope="module")
def grid():
    return run_experiment(small())


# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_digest():
    cfg = small()
    assert cfg.metric == "AP" and cfg.cf_mode == "oracle"
    assert [p.name for p in cfg.perturbations] == ["GC", "CC", "BC", "SC", "GB"]
    assert cfg.digest() == small().digest()
    assert len(cfg.digest()) == 64


def test_digest_tracks_content():
    a = small()
    b = H.loads(SMALL.replace("seeds = [0, 1, 2]", "seeds = [0, 1, 3]"))
    c = H.loads('output_dir = "x"\n' + SMALL)
    assert a.digest() != b.digest()
    assert a.digest() == c.digest()


def test_axis_tags():
    cfg = small()
    assert [a.tag for a in cfg.axes] == ["scanner=A>B", "scanner=B>A"]
    comp = H.ShiftAxis({"sex": "M", "scanner": "A"}, {"scanner": "B", "sex": "F"})
    assert comp.composite and comp.tag == "scanner=A>B,sex=M>F"
    with pytest.raises(ConfigError):
        H.ShiftAxis({"scanner": "A"}, {"scanner": "A"})
    with pytest.raises(ConfigError):
        H.ShiftAxis({"scanner": "A"}, {"sex": "F"})


@pytest.mark.parametrize("text, match", [
    (SMALL + "bogus = 1\n", "unknown keys"),
    (SMALL.replace('kind = "mlp"', 'kind = "mlp"\nseed = 3'), "seeds list"),
    (SMALL + 'cf_mode = "wizard"\n', "cf_mode"),
    ('cf_mode = "analytic"\n' + SMALL.replace('train = { scanner = "A" }\neval = { scanner = "B" }',
                                              'train = { sex = "M" }\neval = { sex = "F" }'), "scanner only"),
    (SMALL + "[[perturbations]]\nkind = \"GC\"\n[[perturbations]]\nkind = \"GC\"\n", "unique"),
    (SMALL.replace('eval = { scanner = "B" }', 'eval = { scanner = "Z" }'), "not in"),
    ("seeds = [", "TOML"),
    (SMALL.replace("[0.6, 0.2, 0.2]", "[0.6, 0.2, 0.3]"), "split_ratios"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        H.loads(text)


def test_config_needs_axes_and_two_runs():
    with pytest.raises(ConfigError, match="axis"):
        small(drop_axes=True)
    one = SMALL.replace("seeds = [0, 1, 2]", "seeds = [0]")
    one = one[:one.index("[[axes]]\ntrain = { scanner = \"B\" }")] + one[one.index("[[classifiers]]"):]
    one = one[:one.index('[[classifiers]]\nkind = "mlp"')] + one[one.index("[matching]"):]
    with pytest.raises(ConfigError, match="at least 2 runs"):
        H.loads(one)


def test_density_task_uses_macro_auc():
    cfg = H.loads('task = "density"\n' + SMALL)
    assert cfg.metric == "AUC_macro_ovr"
    assert cfg.class_count == 4
    assert all(c.class_count == 4 for c in cfg.classifiers)
    with pytest.raises(ConfigError, match="binary"):
        H.loads('task = "density"\nmetric = "AP"\n' + SMALL)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        H.load(tmp_path / "missing.toml")


# ---------------------------------------------------------------------------
# run_experiment


def test_grid_gives_n_equal_to_design_product(grid):
    report, _ = grid
    pooled = [a for a in report.agreement if a.scope == "pooled"]
    assert [a.method for a in pooled] == ["GC", "CC", "BC", "SC", "GB", "CF"]
    assert all(a.n == 12 for a in pooled)
    per_domain = [a for a in report.agreement if a.scope != "pooled"]
    assert {a.scope for a in per_domain} == {"scanner=A>B", "scanner=B>A"}
    assert all(a.n == 6 for a in per_domain)
    assert len(report.runs) == 12


def test_iid_delta_is_exactly_zero(grid):
    report, _ = grid
    iid = [s for s in report.shift_results if s.condition == "IID"]
    assert len(iid) == 12
    assert all(s.delta_vs_iid == 0.0 for s in iid)


def test_every_run_has_every_condition(grid):
    report, scores = grid
    by_key = {}
    for s in report.shift_results:
        by_key.setdefault(s.pair_key, set()).add(s.condition)
    assert all(c == {"IID", "GC", "CC", "BC", "SC", "GB", "CF", "OOD"} for c in by_key.values())
    assert {r.condition.rpartition("/")[0] for r in scores} == {"scanner=A>B", "scanner=B>A"}


def test_agreement_recomputable_from_shift_results(grid):
    report, _ = grid
    again = agreement_rows(report.shift_results, ["GC", "CC", "BC", "SC", "GB", "CF"])
    assert len(again) == len(report.agreement)
    for a, b in zip(again, report.agreement):
        for f in ("method", "scope", "n", "mae", "mae_std", "pearson_r", "kendall_tau"):
            va, vb = getattr(a, f), getattr(b, f)
            assert va == vb or (isinstance(va, float) and math.isnan(va) and math.isnan(vb))


def test_agreement_mae_matches_definition(grid):
    report, _ = grid
    res = report.shift_results
    ood = {s.pair_key: s.delta_vs_iid for s in res if s.condition == "OOD"}
    cf = {s.pair_key: s.delta_vs_iid for s in res if s.condition == "CF"}
    errs = np.array([abs(cf[k] - ood[k]) for k in ood])
    row = next(a for a in report.agreement if a.method == "CF" and a.scope == "pooled")
    assert row.mae == pytest.approx(errs.mean(), abs=1e-15)
    assert row.mae_std == pytest.approx(errs.std(), abs=1e-15)


def test_empty_perturbation_suite():
    report, _ = run_experiment(small(**{"seeds = [0, 1, 2]": "seeds = [0]\nperturbations = []"}))
    assert {s.condition for s in report.shift_results} == {"IID", "CF", "OOD"}
    assert {a.method for a in report.agreement} == {"CF"}


def test_composite_axis_reports_subgroup_rows():
    text = SMALL.replace('train = { scanner = "B" }\neval = { scanner = "A" }',
                         'train = { scanner = "A", sex = "M" }\neval = { scanner = "B", sex = "F" }')
    text = text.replace("seeds = [0, 1, 2]", "seeds = [0, 1]\nperturbations = []")
    report, _ = run_experiment(H.loads(text))
    scopes = {a.scope for a in report.agreement}
    assert "scanner=A>B,sex=M>F" in scopes and "pooled" in scopes
    comp = [r for r in report.runs if r["axis"] == "scanner=A>B,sex=M>F"]
    assert len(comp) == 4 and all(r["n_iid"] > 0 and r["n_ood"] > 0 for r in comp)


def test_analytic_mode_runs():
    cfg = H.loads('cf_mode = "analytic"\n' + SMALL.replace("seeds = [0, 1, 2]", "seeds = [0]\nperturbations = []"))
    report, _ = run_experiment(cfg)
    assert report.metadata["cf_mode"] == "analytic"
    assert all(a.n == 4 for a in report.agreement if a.scope == "pooled")


def test_density_task_runs():
    text = 'task = "density"\n' + SMALL.replace("seeds = [0, 1, 2]", "seeds = [0]\nperturbations = []")
    report, _ = run_experiment(H.loads(text))
    assert {s.metric for s in report.shift_results} == {"AUC_macro_ovr"}


def test_matching_infeasible_is_a_data_error():
    text = SMALL.replace("seeds = [0, 1, 2]", "seeds = [0]\nperturbations = []")
    text = text.replace("prevalence = 0.5", 'prevalence = 0.5\nprevalence_by_group = { B = 0.0 }')
    with pytest.raises(DataError, match="scanner=A>B"):
        run_experiment(H.loads(text))


def test_training_failure_names_the_run(monkeypatch):
    from cfstress.harness import run as R

    def boom(*a, **k):
        raise NumericError("non-finite loss at epoch 1, batch 0")

    monkeypatch.setattr(R.C, "train_classifier", boom)
    with pytest.raises(NumericError, match=r"classifier=logistic-\w+ seed=0 axis=scanner=A>B"):
        run_experiment(small())


# ---------------------------------------------------------------------------
# reports


def test_json_round_trip_and_determinism(grid):
    report, _ = grid
    blob = emit_report(report, "json")
    assert blob == emit_report(report, "json")
    back = report_from_json(blob)
    assert emit_report(back, "json") == blob
    assert back.shift_results == report.shift_results
    assert back.config_digest == report.config_digest


def test_json_floats_and_nan(grid):
    report, _ = grid
    blob = emit_report(report, "json").decode()
    d = json.loads(blob)
    assert list(d) == sorted(d)
    bc = next(a for a in d["agreement"] if a["method"] == "BC" and a["scope"] == "pooled")
    # brightness never changes a ranking of standardised features, so BC deltas are flat
    if bc["pearson_r"] is None:
        assert "NaN" not in blob and "nan" not in blob.lower().replace('"note"', "")
    value = next(s["value"] for s in d["shift_results"] if s["condition"] == "OOD")
    assert re.search(r'"value": ' + re.escape(format(value, ".17g")), blob)


def test_nan_written_as_null():
    r = RunReport("d", (), (X.AgreementStats("CF", "pooled", 2, 0.1, 0.0, math.nan, math.nan,
                                              math.nan, math.nan, "constant"),))
    blob = emit_report(r, "json")
    assert b"null" in blob and b"NaN" not in blob
    assert math.isnan(report_from_json(blob).agreement[0].pearson_r)


def test_csv_tables(grid):
    report, _ = grid
    files = emit_report(report, "csv")
    assert set(files) == {"shift_results.csv", "agreement_stats.csv", "agreement_mae.csv"}
    mae = files["agreement_mae.csv"].decode().splitlines()
    assert [line.split(",")[0] for line in mae[1:]] == ["GC", "CC", "BC", "SC", "GB", "CF"]
    assert mae[0].startswith("method,pooled mae,pooled mae_std")
    assert len(files["shift_results.csv"].decode().splitlines()) == 1 + len(report.shift_results)
    assert files == emit_report(report, "csv")
    with pytest.raises(ValueError):
        emit_report(report, "xml")


def test_report_from_garbage():
    with pytest.raises(DataError):
        report_from_json(b"{}")


# ---------------------------------------------------------------------------
# charts


def _one_condition_report():
    rows = (X.ShiftResult("m0", 0, "d", "IID", "AP", 0.8, 0.0),
            X.ShiftResult("m1", 1, "d", "IID", "AP", 0.7, 0.0))
    runs = ({"model_id": "m0", "classifier": "logistic"}, {"model_id": "m1", "classifier": "logistic"})
    return RunReport("x", rows, (), runs)


def test_zero_delta_bar_sits_on_baseline():
    svg = emit_bar_chart(_one_condition_report(), "d").decode()
    rects = re.findall(r'<rect [^>]*data-condition[^>]*>', svg)
    assert len(rects) == 1
    assert 'height="0.00"' in rects[0]
    y = re.search(r'y="([\d.]+)"', rects[0]).group(1)
    base = re.search(r'<line [^>]*y1="([\d.]+)"[^>]*class="baseline"', svg).group(1)
    assert y == base
    assert 'width="800" height="400"' in svg


def test_chart_bars_equal_report_means(grid):
    report, _ = grid
    svg = emit_bar_chart(report, "scanner=A>B").decode()
    assert svg == emit_bar_chart(report, "scanner=A>B").decode()
    bars = re.findall(r'data-condition="([^"]+)" data-classifier="([^"]+)" data-mean="([^"]+)"', svg)
    assert len(bars) == 8 * 2
    labels = {r["model_id"]: r["classifier"] for r in report.runs}
    for cond, clf, mean in bars:
        vals = [s.delta_vs_iid for s in report.shift_results
                if s.domain == "scanner=A>B" and s.condition == cond and labels[s.model_id] == clf]
        assert float(mean) == np.mean(vals)
    conditions, _, _ = bar_chart_data(report, "scanner=A>B")
    assert conditions == ["IID", "GC", "CC", "BC", "SC", "GB", "CF", "OOD"]


def test_chart_unknown_domain(grid):
    with pytest.raises(DataError, match="unknown domain"):
        emit_bar_chart(grid[0], "nowhere")


# ---------------------------------------------------------------------------
# command line


def test_cli_pipeline(tmp_path, capsys):
    w = tmp_path / "world"
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(w), "-n", "120"]) == 0
    assert (w / "manifest.csv").exists() and len(list((w / "images").glob("*.pgm"))) == 120
    assert cli.main(["split", str(w / "manifest.csv"), "--ratios", "0.6,0.2,0.2", "--out", str(w)]) == 0
    assert cli.main(["perturb", str(w / "images"), "--kind", "GC", "--param", "gamma=2",
                     "--out", str(tmp_path / "pert")]) == 0
    assert len(list((tmp_path / "pert" / "GC").glob("*.pgm"))) == 120
    assert cli.main(["counterfactual", "--mode", "oracle", "--world", str(w), "--set", "scanner=B",
                     "--out", str(tmp_path / "cf")]) == 0
    assert cli.main(["counterfactual", "--mode", "ingest", "--pairs", str(tmp_path / "cf" / "pairs.csv"),
                     "--manifest", str(w / "manifest.csv"), "--images", str(w / "images"),
                     "--twins", str(tmp_path / "cf" / "twins")]) == 0
    assert "valid counterfactual pairs" in capsys.readouterr().out
    assert cli.main(["counterfactual", "--mode", "analytic", "--world", str(w), "--set", "scanner=A",
                     "--out", str(tmp_path / "cfa")]) == 0
    model = tmp_path / "model"
    assert cli.main(["train", "--config", str(cfg), "--manifest", str(w / "manifest.csv"),
                     "--images", str(w / "images"), "--subgroup", "scanner=A", "--out", str(model)]) == 0
    scores = []
    for cond, group in (("scanner=A>B/IID", "scanner=A"), ("scanner=A>B/OOD", "scanner=B")):
        path = tmp_path / f"{cond.replace('/', '_')}.csv"
        assert cli.main(["score", "--model", str(model), "--manifest", str(w / "manifest.csv"),
                         "--images", str(w / "images"), "--condition", cond, "--subgroup", group,
                         "--out", str(path)]) == 0
        scores.append(str(path))
    assert cli.main(["score", "--import", scores[0], "--out", str(tmp_path / "copy.csv")]) == 0
    # duplicate the rows under a second seed so agreement has two paired runs
    header = open(scores[0]).read().splitlines()[0]
    body = [line for p in scores for line in open(p).read().splitlines()[1:]]
    second = [line.replace(",0,", ",1,", 1) for line in body]
    both = tmp_path / "both.csv"
    both.write_text("\n".join([header] + body + second) + "\n")
    ev = tmp_path / "ev"
    code = cli.main(["evaluate", "--scores", str(both), "--manifest", str(w / "manifest.csv"),
                     "--out", str(ev), "--format", "csv"])
    assert code == 0
    assert (ev / "report.json").exists() and (ev / "agreement_mae.csv").exists()
    assert cli.main(["report", str(ev / "report.json"), "--format", "csv", "--out", str(tmp_path / "rep")]) == 0
    assert cli.main(["plot", str(ev / "report.json"), "--out", str(tmp_path / "plots")]) == 0
    assert list((tmp_path / "plots").glob("chart_*.svg"))


def test_cli_run_with_external_pairs(tmp_path):
    w = tmp_path / "world"
    assert cli.main(["gen", "--out", str(w), "-n", "300", "--seed", "3"]) == 0
    assert cli.main(["counterfactual", "--mode", "oracle", "--world", str(w), "--set", "scanner=B",
                     "--out", str(tmp_path / "cf")]) == 0
    cfg = tmp_path / "ext.toml"
    cfg.write_text("""
cf_mode = "external"
seeds = [0, 1]
split_ratios = [0.6, 0.2, 0.2]
perturbations = []

[data]
manifest = "world/manifest.csv"
images = "world/images"
pairs = "cf/pairs.csv"
twins = "cf/twins"

[[axes]]
train = { scanner = "A" }
eval = { scanner = "B" }

[[classifiers]]
kind = "logistic"
input_side = 8
max_epochs = 5

[matching]
match_age = false
""")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    d = json.loads((out / "report.json").read_text())
    assert {s["condition"] for s in d["shift_results"]} == {"IID", "CF", "OOD"}
    assert (out / "scores.csv").exists()


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.toml"
    bad.write_text("seeds = [\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "nope.toml")]) == 2
    assert cli.main(["split", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 3
    assert cli.main(["split", str(tmp_path / "missing.csv"), "--ratios", "a,b,c", "--out", str(tmp_path)]) == 2
    assert cli.main(["plot", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3

    good = tmp_path / "good.toml"
    good.write_text(SMALL)
    from cfstress.harness import run as R

    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(R.C, "train_classifier", boom)
    assert cli.main(["run", "--config", str(good), "--out", str(tmp_path / "o")]) == 4
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen"])
    assert exc.value.code == 2


def test_cli_run_is_deterministic(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL.replace("seeds = [0, 1, 2]", "seeds = [0, 1]\nperturbations = []"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", str(cfg), "--out", str(a), "--format", "csv"]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(b), "--format", "csv"]) == 0
    for name in ("report.json", "agreement_mae.csv", "shift_results.csv", "scores.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
