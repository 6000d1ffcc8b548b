"""Experiment configuration: a TOML document mapped onto frozen dataclasses.

Canonical layout (every table except ``[[axes]]`` and ``[[classifiers]]`` is
optional)::

    output_dir = "runs/demo"
    task = "lesion"              # label attribute: lesion | density (world) or label
    metric = "AP"                # AP | AUC_macro_ovr; default follows the class count
    cf_mode = "oracle"           # analytic | oracle | external
    seeds = [0, 1, 2]
    split_ratios = [0.8, 0.1, 0.1]
    split_seed = 0

    [world]                      # WorldConfig fields plus n_images
    n_images = 2000

    [data]                       # instead of [world]: images already on disk
    manifest = "manifest.csv"
    images = "images/"
    pairs = "pairs.csv"          # counterfactual twins for cf_mode = "external"
    twins = "twins/"

    [[axes]]
    train = { scanner = "A" }
    eval = { scanner = "B" }

    [[perturbations]]            # omitted: the default suite; [] disables it
    kind = "GC"
    gamma = 1.7

    [[classifiers]]
    kind = "logistic"

    [matching]
    match_age = false
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli

from cfstress.classify import ClassifierSpec
from cfstress.errors import ConfigError
from cfstress.imaging import PerturbationSpec, default_suite
from cfstress.manifest import MatchSpec
from cfstress.metrics import METRIC_KINDS
from cfstress.scmworld import INTERVENABLE, WorldConfig

CF_MODES = ("analytic", "oracle", "external")
TOP_LEVEL = {"output_dir", "task", "metric", "cf_mode", "seeds", "split_ratios", "split_seed",
             "world", "data", "axes", "perturbations", "classifiers", "matching"}


@dataclass(frozen=True)
class ShiftAxis:
    """Train on the ``train`` subgroup, evaluate against the ``eval`` subgroup.

    Both sides are tuples of (attribute, value) over the same attributes; more
    than one attribute makes a composite shift.
    """

    train: tuple
    eval: tuple

    def __post_init__(self):
        object.__setattr__(self, "train", _pairs(self.train))
        object.__setattr__(self, "eval", _pairs(self.eval))
        if not self.train:
            raise ConfigError("a shift axis needs at least one attribute")
        if [k for k, _ in self.train] != [k for k, _ in self.eval]:
            raise ConfigError(f"axis train/eval attributes differ: {self.train} vs {self.eval}")
        if all(a == b for a, b in zip(self.train, self.eval)):
            raise ConfigError(f"axis {self.tag} does not change anything")

    @property
    def attributes(self):
        return tuple(k for k, _ in self.train)

    @property
    def composite(self):
        return len(self.train) > 1

    @property
    def tag(self):
        ev = dict(self.eval)
        return ",".join(f"{k}={v}>{ev[k]}" for k, v in self.train)


def _pairs(value):
    items = value.items() if hasattr(value, "items") else value
    return tuple(sorted((str(k), str(v)) for k, v in items))


@dataclass(frozen=True)
class DataSource:
    manifest: str
    images: str
    class_count: int = None
    pairs: str = None
    twins: str = None


@dataclass(frozen=True)
class ExperimentConfig:
    axes: tuple
    classifiers: tuple
    seeds: tuple = (0,)
    perturbations: tuple = field(default_factory=lambda: tuple(default_suite()))
    world: WorldConfig = None
    n_images: int = 2000
    data: DataSource = None
    task: str = "lesion"
    metric: str = None
    cf_mode: str = "oracle"
    matching: MatchSpec = MatchSpec()
    split_ratios: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "classifiers", tuple(self.classifiers))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "perturbations", tuple(self.perturbations))
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        if self.world is None and self.data is None:
            object.__setattr__(self, "world", WorldConfig())
        if self.metric is None:
            object.__setattr__(self, "metric", "AP" if self.class_count == 2 else "AUC_macro_ovr")
        self.validate()

    @property
    def class_count(self):
        if self.world is not None:
            return len(self.world.density_quantiles) + 1 if self.task == "density" else 2
        return self.data.class_count or 2

    def validate(self):
        if not self.axes:
            raise ConfigError("at least one shift axis is required")
        if not self.classifiers:
            raise ConfigError("at least one classifier is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if len(self.axes) * len(self.classifiers) * len(self.seeds) < 2:
            raise ConfigError("the design grid must give at least 2 runs to compare shifts")
        if self.world is not None and self.data is not None:
            raise ConfigError("give either [world] or [data], not both")
        if self.metric not in METRIC_KINDS:
            raise ConfigError(f"metric must be one of {METRIC_KINDS}")
        if self.metric == "AP" and self.class_count != 2:
            raise ConfigError("AP needs a binary task; use AUC_macro_ovr")
        if self.cf_mode not in CF_MODES:
            raise ConfigError(f"cf_mode must be one of {CF_MODES}")
        if self.world is not None:
            if self.task not in ("lesion", "density"):
                raise ConfigError("world task must be 'lesion' or 'density'")
            if self.cf_mode == "external":
                raise ConfigError("cf_mode 'external' needs a [data] source with pairs")
            if self.n_images < 1:
                raise ConfigError("n_images must be >= 1")
            schema = self.world.schema()
            for axis in self.axes:
                for side in (axis.train, axis.eval):
                    for k, v in side:
                        if k not in INTERVENABLE:
                            raise ConfigError(f"axis attribute {k!r} has no mechanism in the world")
                        if v not in schema[k]:
                            raise ConfigError(f"axis value {k}={v!r} not in {list(schema[k])}")
                if self.cf_mode == "analytic" and axis.attributes != ("scanner",):
                    raise ConfigError(f"axis {axis.tag}: analytic counterfactuals cover the scanner only")
        else:
            if self.cf_mode != "external":
                raise ConfigError("a [data] source needs cf_mode = 'external'")
            if not self.data.pairs:
                raise ConfigError("cf_mode 'external' needs data.pairs")
            if any(axis.composite for axis in self.axes):
                raise ConfigError("external counterfactual pairs cover one attribute per axis")
        tags = [a.tag for a in self.axes]
        if len(set(tags)) != len(tags):
            raise ConfigError("duplicate shift axes")
        names = [p.name for p in self.perturbations]
        if len(set(names)) != len(names):
            raise ConfigError("perturbation names must be unique; set name = ... to disambiguate")
        if any(n in ("IID", "OOD", "CF") or "/" in n for n in names):
            raise ConfigError("perturbation names may not be IID, OOD, CF or contain '/'")
        labels = [classifier_label(c) for c in self.classifiers]
        if len(set(labels)) != len(labels):
            raise ConfigError("classifier specs must differ in more than the seed")
        for c in self.classifiers:
            if c.class_count != self.class_count:
                raise ConfigError(f"classifier class_count {c.class_count} != task class count {self.class_count}")
        r = self.split_ratios
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError("split_ratios needs three nonnegative entries summing to 1")

    def to_dict(self):
        d = {
            "axes": [{"train": dict(a.train), "eval": dict(a.eval)} for a in self.axes],
            "classifiers": [_spec_dict(c) for c in self.classifiers],
            "seeds": list(self.seeds),
            "perturbations": [{"kind": p.kind, "name": p.name, **p.params()} for p in self.perturbations],
            "task": self.task,
            "metric": self.metric,
            "cf_mode": self.cf_mode,
            "matching": asdict(self.matching),
            "split_ratios": list(self.split_ratios),
            "split_seed": self.split_seed,
            "output_dir": self.output_dir,
        }
        if self.world is not None:
            d["world"] = {**self.world.to_dict(), "n_images": self.n_images}
        else:
            d["data"] = {k: v for k, v in asdict(self.data).items() if v is not None}
        return d

    def digest(self):
        """SHA-256 of the canonical JSON form; the output directory is excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _spec_dict(spec):
    d = asdict(spec)
    d.pop("seed")
    return d


def classifier_label(spec):
    """Seed-free name of a classifier spec, e.g. ``mlp`` or ``mlp-3fa2c1``."""
    defaults = _spec_dict(ClassifierSpec(kind=spec.kind, class_count=spec.class_count))
    if _spec_dict(spec) == defaults:
        return spec.kind
    blob = json.dumps(_spec_dict(spec), sort_keys=True).encode()
    return f"{spec.kind}-{hashlib.sha256(blob).hexdigest()[:6]}"


def _table(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


def from_dict(d, base_dir=None):
    """Build an ExperimentConfig from a parsed TOML mapping."""
    d = dict(d)
    _table(d, TOP_LEVEL, "config")
    try:
        kw = {}
        for key in ("task", "metric", "cf_mode", "split_seed", "output_dir"):
            if key in d:
                kw[key] = d[key]
        if "seeds" in d:
            kw["seeds"] = tuple(d["seeds"])
        if "split_ratios" in d:
            kw["split_ratios"] = tuple(d["split_ratios"])
        if "world" in d:
            w = dict(d["world"])
            if "n_images" in w:
                kw["n_images"] = int(w.pop("n_images"))
            kw["world"] = WorldConfig.from_dict(w)
        if "data" in d:
            data = dict(_table(d["data"], DataSource.__dataclass_fields__, "[data]"))
            if base_dir is not None:
                for k in ("manifest", "images", "pairs", "twins"):
                    if data.get(k):
                        data[k] = str(Path(base_dir, data[k]))
            kw["data"] = DataSource(**data)
        kw["axes"] = tuple(ShiftAxis(a["train"], a["eval"]) for a in d.get("axes", ()))
        k_default = None
        if "world" in kw and kw.get("task") == "density":
            k_default = len(kw["world"].density_quantiles) + 1
        elif "data" in kw and kw["data"].class_count:
            k_default = kw["data"].class_count
        specs = []
        for c in d.get("classifiers", ()):
            c = dict(_table(c, ClassifierSpec.__dataclass_fields__, "[[classifiers]]"))
            if "seed" in c:
                raise ConfigError("classifier seeds come from the top-level seeds list")
            if k_default and "class_count" not in c:
                c["class_count"] = k_default
            specs.append(ClassifierSpec(**c))
        kw["classifiers"] = tuple(specs)
        if "perturbations" in d:
            kw["perturbations"] = tuple(
                PerturbationSpec(**_table(p, PerturbationSpec.__dataclass_fields__, "[[perturbations]]"))
                for p in d["perturbations"])
        if "matching" in d:
            kw["matching"] = MatchSpec(**_table(d["matching"], MatchSpec.__dataclass_fields__, "[matching]"))
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def loads(text, base_dir=None):
    try:
        d = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(d, base_dir)


def load(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, base_dir=path.parent)
