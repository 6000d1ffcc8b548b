"""Command-line surface. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure."""

import argparse
import dataclasses
import hashlib
import json
import re
import sys
from pathlib import Path

from cfstress import classify as C
from cfstress import manifest as M
from cfstress import metrics as X
from cfstress import scmworld as W
from cfstress.errors import ConfigError, DataError, NumericError
from cfstress.harness import config as cfgmod
from cfstress.harness.report import emit_bar_chart, emit_report, report_from_json
from cfstress.harness.run import ChainStore, RunReport, agreement_rows, run_experiment
from cfstress.imaging import KINDS, ImageGray, PerturbationSpec, default_suite, encode_pgm, perturb_array, read_pgm

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write(path, blob):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob if isinstance(blob, bytes) else blob.encode("utf-8"))


def _write_image(path, img):
    if not isinstance(img, ImageGray):
        img = ImageGray.from_array(img)
    _write(path, encode_pgm(img))


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _assignments(items, what):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"{what} expects key=value, got {item!r}")
        out[key] = value
    return out


def _load_config(args):
    return cfgmod.load(args.config) if args.config else None


def _load_manifest(path, class_count=None):
    return M.parse_manifest(_read(path).decode("utf-8"), class_count=class_count)


def safe_name(tag):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", tag) or "_"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    cfg = _load_config(args)
    world = cfg.world if cfg and cfg.world else W.WorldConfig()
    n = args.n or (cfg.n_images if cfg else 2000)
    if args.seed is not None:
        world = dataclasses.replace(world, seed=args.seed)
    ws = W.sample_world(world, n)
    out = Path(args.out)
    for r, img in zip(ws.manifest.records, ws.images):
        _write_image(out / "images" / r.source, img)
    _write(out / "manifest.csv", M.format_manifest(ws.manifest))
    _write(out / "world.json", json.dumps({**world.to_dict(), "n_images": n}, sort_keys=True, indent=2))
    _write(out / "noise.json", json.dumps({k: u.to_dict() for k, u in ws.noise.items()}, sort_keys=True))
    print(f"wrote {n} images to {out}")


def cmd_split(args):
    try:
        ratios = tuple(float(v) for v in args.ratios.split(","))
    except ValueError:
        raise ConfigError(f"--ratios must be comma-separated numbers, got {args.ratios!r}") from None
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("--ratios needs three nonnegative values summing to 1")
    m = _load_manifest(args.manifest)
    out = M.split_by_patient(m, ratios, args.seed or 0)
    _write(Path(args.out) / "manifest.csv", M.format_manifest(out))


def _perturbations(args):
    if args.kind:
        params = {}
        for k, v in _assignments(args.param, "--param").items():
            params[k] = v if k == "contrast_pivot" else (int(v) if k == "kernel_size" else float(v))
        try:
            return [PerturbationSpec(args.kind, **params)]
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    cfg = _load_config(args)
    return list(cfg.perturbations) if cfg else default_suite()


def cmd_perturb(args):
    specs = _perturbations(args)
    files = sorted(Path(args.images).glob("*.pgm"))
    if not files:
        raise DataError(f"no .pgm files in {args.images}")
    for f in files:
        img = read_pgm(f)
        for spec in specs:
            _write_image(Path(args.out) / spec.name / f.name, perturb_array(img.data, spec))
    print(f"perturbed {len(files)} images x {len(specs)} settings")


def _world_dir(path):
    d = Path(path)
    world = json.loads(_read(d / "world.json"))
    world.pop("n_images", None)
    cfg = W.WorldConfig.from_dict(world)
    m = M.parse_manifest(_read(d / "manifest.csv").decode("utf-8"), class_count=2,
                         attribute_schema=cfg.schema())
    return d, cfg, m


def cmd_counterfactual(args):
    if args.mode == "ingest":
        if not (args.pairs and args.manifest and args.images):
            raise ConfigError("ingest needs --pairs, --manifest and --images")
        m = _load_manifest(args.manifest)
        store = W.DirectoryImageStore(args.images)
        twins = W.DirectoryImageStore(args.twins or args.images)
        pairs = W.ingest_counterfactual_pairs(_read(args.pairs).decode("utf-8"), m, ChainStore(store, twins))
        print(f"{len(pairs)} valid counterfactual pairs")
        return
    if not args.world:
        raise ConfigError(f"--mode {args.mode} needs --world (a directory written by gen)")
    target = _assignments(args.set, "--set")
    if not target:
        raise ConfigError("give the intervention with --set attribute=value")
    if args.mode == "analytic" and set(target) != {"scanner"}:
        raise ConfigError("analytic counterfactuals intervene on the scanner only")
    root, cfg, m = _world_dir(args.world)
    noise = None
    if args.mode == "oracle":
        noise = {k: W.ExogenousNoise.from_dict(v) for k, v in json.loads(_read(root / "noise.json")).items()}
    records = [r for r in m.records if args.split is None or r.split == args.split]
    rows = []
    out = Path(args.out)
    for r in records:
        if all(r.get(k) == v for k, v in target.items()):
            continue
        if args.mode == "oracle":
            pair = W.counterfactual_oracle(r, noise[r.image_id], target, cfg)
            twin = pair.twin
        else:
            twin = W.counterfactual_scanner(read_pgm(root / "images" / r.source), r.scanner, target["scanner"], cfg)
        name = f"{r.image_id}.pgm"
        _write_image(out / "twins" / name, twin)
        rows += [(r.image_id, name, k, v) for k, v in sorted(target.items())]
    lines = [",".join(W.PAIR_COLUMNS)] + [",".join(row) for row in rows]
    _write(out / "pairs.csv", "\n".join(lines) + "\n")
    print(f"wrote {len(rows)} pair rows to {out}")


def _lookup(images):
    store = W.DirectoryImageStore(images)
    return lambda r: W.lookup_image(store, r.image_id, r.source)


def _classifier_spec(args):
    cfg = _load_config(args)
    spec = cfg.classifiers[0] if cfg else C.ClassifierSpec(kind=args.kind or "logistic")
    if args.kind and cfg:
        spec = dataclasses.replace(spec, kind=args.kind)
    return spec.with_seed(args.seed or 0)


def cmd_train(args):
    spec = _classifier_spec(args)
    m = _load_manifest(args.manifest, class_count=spec.class_count)
    group = _assignments(args.subgroup, "--subgroup")
    look = _lookup(args.images)
    train = C.LabeledImages.from_records(M.filter_subgroup(m, group, "train"), look)
    val = C.LabeledImages.from_records(M.filter_subgroup(m, group, "val"), look)
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and val subgroups must be non-empty; run split first")
    model = C.train_classifier(train, val, spec)
    model.save(args.out)
    print(f"{model.model_id}: best epoch {model.best_epoch}, stopped at {model.stopped_epoch}")


def cmd_score(args):
    if args.import_scores:
        table = C.import_scores(_read(args.import_scores))
    else:
        if not (args.model and args.manifest and args.images and args.condition):
            raise ConfigError("score needs --model, --manifest, --images and --condition (or --import)")
        model = C.TrainedModel.load(args.model)
        m = _load_manifest(args.manifest, class_count=model.spec.class_count)
        records = M.filter_subgroup(m, _assignments(args.subgroup, "--subgroup"), args.split)
        data = C.LabeledImages.from_records(records, _lookup(args.images))
        table = C.predict_scores(model, data, args.condition)
    _write(args.out, C.export_scores(table))
    print(f"wrote {len(table)} score rows")


def _method_order(conditions):
    rest = sorted(c for c in conditions if c not in (X.IID, X.OOD, X.CF) and c not in KINDS)
    return [k for k in KINDS if k in conditions] + rest + [X.CF] * (X.CF in conditions)


def cmd_evaluate(args):
    blobs = [_read(p) for p in args.scores]
    table = C.ScoreTable((), 2)
    for b in blobs:
        table = table + C.import_scores(b)
    m = _load_manifest(args.manifest, class_count=table.class_count)
    labels = {r.image_id: r.label for r in m.records}
    metric = args.metric or ("AP" if table.class_count == 2 else "AUC_macro_ovr")
    results = X.shift_deltas(table, labels, metric)
    conditions = {r.condition for r in results}
    if X.OOD not in conditions:
        raise DataError("scores contain no OOD condition to compare against")
    report = RunReport(
        config_digest=hashlib.sha256(b"".join(blobs)).hexdigest(),
        shift_results=tuple(results),
        agreement=agreement_rows(results, _method_order(conditions)),
        metadata={"metric": metric, "source": "evaluate"},
    )
    _emit(report, args.out, args.format)


def _emit(report, out, fmt):
    out = Path(out)
    _write(out / "report.json", emit_report(report, "json"))
    if fmt == "csv":
        for name, blob in emit_report(report, "csv").items():
            _write(out / name, blob)


def _load_report(path):
    return report_from_json(_read(path))


def cmd_report(args):
    report = _load_report(args.report)
    if args.format == "csv":
        for name, blob in emit_report(report, "csv").items():
            _write(Path(args.out) / name, blob)
    else:
        _write(Path(args.out) / "report.json", emit_report(report, "json"))


def cmd_plot(args):
    report = _load_report(args.report)
    domains = [args.domain] if args.domain else report.domains()
    for d in domains:
        svg = emit_bar_chart(report, d)
        if args.domain and args.out.endswith(".svg"):
            _write(args.out, svg)
        else:
            _write(Path(args.out) / f"chart_{safe_name(d)}.svg", svg)


def cmd_run(args):
    if not args.config:
        raise ConfigError("run needs --config")
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        if cfg.world is None:
            raise ConfigError("--seed overrides the world seed; this config reads images from disk")
        cfg = dataclasses.replace(cfg, world=dataclasses.replace(cfg.world, seed=args.seed))
    out = Path(args.out or cfg.output_dir)

    def progress(info):
        print(f"[{info['axis']}] {info['classifier']} seed {info['seed']}: "
              f"stopped at epoch {info['stopped_epoch']}", file=sys.stderr)

    report, scores = run_experiment(cfg, progress)
    _emit(report, out, args.format)
    _write(out / "scores.csv", C.export_scores(scores))
    for d in report.domains():
        _write(out / f"chart_{safe_name(d)}.svg", emit_bar_chart(report, d))
    for a in report.agreement:
        if a.scope == "pooled":
            print(f"{a.method:>4}  n={a.n:<3d} MAE {a.mae:.4f} ± {a.mae_std:.4f}  "
                  f"r {a.pearson_r:+.3f}  tau {a.kendall_tau:+.3f}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--format", choices=("json", "csv"), default="json")

    p = argparse.ArgumentParser(prog="cfstress", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="sample a synthetic world to disk")
    g.add_argument("-n", type=int, help="number of images")
    g.set_defaults(func=cmd_gen, need_out=True)

    s = sub.add_parser("split", parents=[common], help="patient-level train/val/test split")
    s.add_argument("manifest")
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.set_defaults(func=cmd_split, need_out=True)

    pt = sub.add_parser("perturb", parents=[common], help="apply classical perturbations to a PGM directory")
    pt.add_argument("images")
    pt.add_argument("--kind", choices=KINDS)
    pt.add_argument("--param", action="append", help="parameter override, e.g. gamma=1.7")
    pt.set_defaults(func=cmd_perturb, need_out=True)

    cf = sub.add_parser("counterfactual", parents=[common], help="generate or ingest counterfactual twins")
    cf.add_argument("--mode", choices=("analytic", "oracle", "ingest"), required=True)
    cf.add_argument("--world", help="directory written by gen")
    cf.add_argument("--set", action="append", help="intervention, e.g. scanner=B")
    cf.add_argument("--split", help="only records in this split")
    cf.add_argument("--pairs")
    cf.add_argument("--manifest")
    cf.add_argument("--images")
    cf.add_argument("--twins")
    cf.set_defaults(func=cmd_counterfactual, need_out=False)

    t = sub.add_parser("train", parents=[common], help="train one classifier")
    t.add_argument("--manifest", required=True)
    t.add_argument("--images", required=True)
    t.add_argument("--kind", choices=C.KINDS)
    t.add_argument("--subgroup", action="append", help="training subgroup, e.g. scanner=A")
    t.set_defaults(func=cmd_train, need_out=True)

    sc = sub.add_parser("score", parents=[common], help="score images with a model, or import scores")
    sc.add_argument("--model")
    sc.add_argument("--manifest")
    sc.add_argument("--images")
    sc.add_argument("--condition", help="condition tag, e.g. scanner=A>B/CF")
    sc.add_argument("--subgroup", action="append")
    sc.add_argument("--split", default="test")
    sc.add_argument("--import", dest="import_scores", metavar="CSV")
    sc.set_defaults(func=cmd_score, need_out=True)

    ev = sub.add_parser("evaluate", parents=[common], help="shift deltas and agreement from score CSVs")
    ev.add_argument("--scores", nargs="+", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--metric", choices=X.METRIC_KINDS)
    ev.set_defaults(func=cmd_evaluate, need_out=True)

    rp = sub.add_parser("report", parents=[common], help="re-emit a report as JSON or CSV")
    rp.add_argument("report")
    rp.set_defaults(func=cmd_report, need_out=True)

    pl = sub.add_parser("plot", parents=[common], help="SVG bar chart per domain")
    pl.add_argument("report")
    pl.add_argument("--domain")
    pl.set_defaults(func=cmd_plot, need_out=True)

    r = sub.add_parser("run", parents=[common], help="full pipeline from a config")
    r.set_defaults(func=cmd_run, need_out=False)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.need_out and not args.out:
        parser.error(f"{args.command} needs --out")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
