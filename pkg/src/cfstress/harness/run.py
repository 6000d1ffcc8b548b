"""Run the full stress-testing grid: classifiers x seeds x shift axes."""

import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import cfstress
from cfstress import _kernels
from cfstress import classify as C
from cfstress import manifest as M
from cfstress import metrics as X
from cfstress import scmworld as W
from cfstress.errors import DataError, NumericError
from cfstress.harness.config import classifier_label
from cfstress.imaging import perturb_array

STATS_NOTES = {
    "mae_std": "population standard deviation",
    "pearson_p": "two-sided, Student t with n-2 degrees of freedom, no tie correction",
    "kendall_p": "two-sided normal approximation with tie-adjusted variance",
}


@dataclass(frozen=True)
class RunReport:
    config_digest: str
    shift_results: tuple
    agreement: tuple
    runs: tuple = ()  # one dict per (classifier, seed, axis) with training details
    metadata: dict = field(default_factory=dict)

    def domains(self):
        return sorted({r.domain for r in self.shift_results})

    def methods(self):
        seen = []
        for a in self.agreement:
            if a.method not in seen:
                seen.append(a.method)
        return seen

    def classifier_of(self, model_id):
        for run in self.runs:
            if run["model_id"] == model_id:
                return run["classifier"]
        return model_id


@dataclass
class _Data:
    manifest: M.RecordManifest
    lookup: object  # record -> (h, w) array
    noise: dict = None
    world: W.WorldConfig = None
    pairs: dict = None  # (factual_id, attribute, value) -> twin array


def _world_data(cfg):
    ws = W.sample_world(cfg.world, cfg.n_images)
    m = M.split_by_patient(ws.manifest, cfg.split_ratios, cfg.split_seed)
    if cfg.task == "density":
        m = W.relabel(m, "density", cfg.class_count)
    index = ws.index()
    return _Data(m, lambda r: ws.images[index[r.image_id]], ws.noise, cfg.world)


def _disk_data(cfg):
    src = cfg.data
    try:
        text = Path(src.manifest).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {src.manifest}: {exc.strerror}") from None
    m = M.parse_manifest(text, class_count=src.class_count)
    if any(r.split in (None, "", "unassigned") for r in m.records):
        m = M.split_by_patient(m, cfg.split_ratios, cfg.split_seed)
    store = W.DirectoryImageStore(src.images)

    def lookup(r):
        return W.lookup_image(store, r.image_id, r.source).data

    pairs = {}
    if src.pairs:
        try:
            pairs_text = Path(src.pairs).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read pairs {src.pairs}: {exc.strerror}") from None
        both = ChainStore(store, W.DirectoryImageStore(src.twins or src.images))
        for p in W.ingest_counterfactual_pairs(pairs_text, m, both):
            (attr, value), = p.intervention
            pairs[(p.factual_record.image_id, attr, value)] = p.twin.data
    return _Data(m, lookup, pairs=pairs)


class ChainStore:
    def __init__(self, *stores):
        self.stores = stores

    def __getitem__(self, key):
        for s in self.stores:
            try:
                return s[key]
            except KeyError:
                continue
        raise KeyError(key)


def _twins(data, cfg, axis, records, stack):
    target = dict(axis.eval)
    if cfg.cf_mode == "analytic":
        (_, src), = axis.train
        return W.counterfactual_scanner_array(stack, src, target["scanner"], data.world)
    if cfg.cf_mode == "oracle":
        return np.stack([W.oracle_twin_array(r, data.noise[r.image_id], target, data.world)
                         for r in records])
    (attr, value), = axis.eval
    out = []
    for r in records:
        twin = data.pairs.get((r.image_id, attr, value))
        if twin is None:
            raise DataError(f"no counterfactual pair for {r.image_id!r} under {attr}={value}")
        out.append(twin)
    return np.stack(out)


def _subset(data, records):
    return C.LabeledImages.from_records(records, data.lookup)


def prepare_axis(data, cfg, axis):
    """Training data and every evaluation condition for one shift axis."""
    train_on = dict(axis.train)
    train = M.filter_subgroup(data.manifest, train_on, "train")
    val = M.filter_subgroup(data.manifest, train_on, "val")
    iid = M.filter_subgroup(data.manifest, train_on, "test")
    for name, recs in (("train", train), ("val", val), ("IID test", iid)):
        if not recs:
            raise DataError(f"axis {axis.tag}: empty {name} subgroup")
    ood_pool = M.filter_subgroup(data.manifest, dict(axis.eval), "test")
    if not ood_pool:
        raise DataError(f"axis {axis.tag}: no test images in the evaluation subgroup")
    try:
        ood = M.match_test_set(ood_pool, iid, cfg.matching)
    except DataError as exc:
        raise DataError(f"axis {axis.tag}: {exc}") from None
    iid_data = _subset(data, iid)
    conditions = {X.IID: iid_data}
    for p in cfg.perturbations:
        conditions[p.name] = iid_data.with_images(perturb_array(iid_data.images, p))
    conditions[X.CF] = iid_data.with_images(_twins(data, cfg, axis, iid, iid_data.images))
    conditions[X.OOD] = _subset(data, ood)
    return _subset(data, train), _subset(data, val), conditions


def _train(train, val, spec, coords):
    try:
        return C.train_classifier(train, val, spec)
    except NumericError as exc:
        raise NumericError(f"{coords}: {exc}") from None
    except DataError as exc:
        raise DataError(f"{coords}: {exc}") from None


def execute_run(train, val, conditions, spec, axis, label):
    """Train one model and score every condition; returns (score rows, run info)."""
    coords = f"classifier={label} seed={spec.seed} axis={axis.tag}"
    model = _train(train, val, spec, coords)
    rows = []
    for name, subset in conditions.items():
        rows.extend(C.predict_scores(model, subset, X.make_condition_tag(axis.tag, name)).rows)
    table = C.ScoreTable(rows, spec.class_count)
    info = {
        "axis": axis.tag,
        "classifier": label,
        "model_id": model.model_id,
        "seed": spec.seed,
        "best_epoch": model.best_epoch,
        "stopped_epoch": model.stopped_epoch,
        "n_train": len(train),
        "n_val": len(val),
        "n_iid": len(conditions[X.IID]),
        "n_ood": len(conditions[X.OOD]),
        "warnings": list(model.warnings),
    }
    return table, info


def agreement_rows(results, methods):
    """Pooled and per-domain agreement for each stress method against OOD."""
    ood = [r for r in results if r.condition == X.OOD]
    domains = sorted({r.domain for r in results})
    rows = []
    for method in methods:
        stress = [r for r in results if r.condition == method]
        rows.append(X.agreement_stats(stress, ood, method, "pooled"))
        for d in domains:
            s = [r for r in stress if r.domain == d]
            o = [r for r in ood if r.domain == d]
            if len(s) >= 2:
                rows.append(X.agreement_stats(s, o, method, d))
    return tuple(rows)


def load_data(cfg):
    return _world_data(cfg) if cfg.world is not None else _disk_data(cfg)


def run_experiment(cfg, progress=None):
    """Evaluate IID, perturbations, counterfactual twins and matched OOD for every run.

    ``progress``, if given, is called with each finished run's info dict.
    Returns ``(report, scores)``.
    """
    data = load_data(cfg)
    labels = {r.image_id: r.label for r in data.manifest.records}
    tables, infos = [], []
    for axis in cfg.axes:
        train, val, conditions = prepare_axis(data, cfg, axis)
        for spec in cfg.classifiers:
            label = classifier_label(spec)
            for seed in cfg.seeds:
                table, info = execute_run(train, val, conditions, spec.with_seed(seed), axis, label)
                tables.append(table)
                infos.append(info)
                if progress:
                    progress(info)
    scores = C.ScoreTable(tuple(row for t in tables for row in t.rows), cfg.class_count)
    results = X.shift_deltas(scores, labels, cfg.metric)
    methods = [p.name for p in cfg.perturbations] + [X.CF]
    report = RunReport(
        config_digest=cfg.digest(),
        shift_results=tuple(results),
        agreement=agreement_rows(results, methods),
        runs=tuple(sorted(infos, key=lambda i: (i["axis"], i["classifier"], i["seed"]))),
        metadata={
            "version": cfstress.__version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": _kernels.BACKEND,
            "seeds": list(cfg.seeds),
            "metric": cfg.metric,
            "cf_mode": cfg.cf_mode,
            "statistics": dict(STATS_NOTES),
        },
    )
    return report, scores
