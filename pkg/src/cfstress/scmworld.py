"""Synthetic structural causal image world with closed-form abduction.

Causal story per image::

    sex, scanner, age  -> lesion (label)         (prevalence may depend on group/age)
    anatomy noise u    -> a = render(u, sex, lesion)      noise-free chest-like anatomy
    scanner            -> x = clamp(a**g_s + b_s * B(p) + noise)

``B`` is a fixed cosine bias field in [-1, 1]. The scanner map is strictly
increasing in ``a`` at every pixel, so it can be inverted from pixels alone;
sex interventions need the stored anatomy noise (the "oracle" path).
"""

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from cfstress.errors import ConfigError, DataError
from cfstress.imaging import ImageGray, read_pgm
from cfstress.manifest import ImageRecord, RecordManifest

BACKGROUND = 0.12
EDGE_WIDTH = 0.1
N_TEXTURE_WAVES = 6
AMPLITUDE_RANGE = (0.03, 0.12)
LEVEL_RANGE = (0.45, 0.6)  # per-image tissue level, mapped linearly onto LUNG_RANGE
SOFT_TISSUE = 0.6
LUNG_RANGE = (0.04, 0.09)
LUNG_TEXTURE = 0.1  # texture scale inside the lungs relative to soft tissue
# lung ellipses in torso units: centre offset (x, y) and radii (x, y)
LUNG_OFFSET = (0.45, -0.05)
LUNG_RADII = (0.32, 0.62)
LUNG_EDGE = 0.15
CONTRAST_RANGE = (0.05, 0.1)
RADIUS_RANGE = (0.1, 0.15)
LESION_WINDOW = (0.06, 0.1)  # half-widths, torso units, around the right lung centre
MAX_ANATOMY = SOFT_TISSUE + AMPLITUDE_RANGE[1] + CONTRAST_RANGE[1]

PROVENANCE = ("analytic-scanner", "oracle-noise", "external")
INTERVENABLE = ("scanner", "sex")


@dataclass(frozen=True)
class ScannerDomain:
    name: str
    exponent: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        if not self.exponent > 0:
            raise ConfigError(f"scanner {self.name}: transfer exponent must be > 0")
        if not 0.0 <= self.bias <= 0.2:
            raise ConfigError(f"scanner {self.name}: bias amplitude must lie in [0, 0.2]")


@dataclass(frozen=True)
class WorldConfig:
    image_size: int = 64
    scanners: tuple = (ScannerDomain("A", 1.0, 0.05), ScannerDomain("B", 1.4, 0.05))
    scanner_weights: tuple = None
    sex_aspect: tuple = (("M", 0.78), ("F", 0.66))  # torso width / height
    sex_weights: tuple = None
    prevalence: float = 0.3
    # keys "scanner/sex", "scanner" or "sex"; most specific match wins
    prevalence_by_group: tuple = ()
    age_range: tuple = (20.0, 90.0)
    age_slope: float = 0.0  # prevalence change per year around the age midpoint
    density_quantiles: tuple = (0.25, 0.5, 0.75)
    noise_floor: float = 0.0
    second_image_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scanners", tuple(
            s if isinstance(s, ScannerDomain) else ScannerDomain(**s) for s in self.scanners))
        for key in ("sex_aspect", "prevalence_by_group"):
            value = getattr(self, key)
            if isinstance(value, Mapping):
                object.__setattr__(self, key, tuple(value.items()))
            else:
                object.__setattr__(self, key, tuple(tuple(v) for v in value))
        for key in ("scanner_weights", "sex_weights", "age_range", "density_quantiles"):
            value = getattr(self, key)
            if value is not None:
                object.__setattr__(self, key, tuple(float(v) for v in value))
        self.validate()

    def validate(self):
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if not self.scanners:
            raise ConfigError("at least one scanner is required")
        names = [s.name for s in self.scanners]
        if len(set(names)) != len(names):
            raise ConfigError("scanner names must be unique")
        if not self.sex_aspect or any(not a > 0 for _, a in self.sex_aspect):
            raise ConfigError("sex_aspect needs positive aspect ratios")
        for label, weights, count in (("scanner_weights", self.scanner_weights, len(names)),
                                      ("sex_weights", self.sex_weights, len(self.sex_aspect))):
            if weights is not None and (len(weights) != count or min(weights) < 0 or sum(weights) <= 0):
                raise ConfigError(f"{label} must have {count} nonnegative entries")
        probs = [self.prevalence] + [p for _, p in self.prevalence_by_group]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("prevalences must lie in [0, 1]")
        q = self.density_quantiles
        if any(not 0 < v < 1 for v in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise ConfigError("density_quantiles must be strictly increasing within (0, 1)")
        if not 0.0 <= self.noise_floor <= 0.05:
            raise ConfigError("noise_floor must lie in [0, 0.05]")
        if not 0.0 <= self.second_image_prob <= 1.0:
            raise ConfigError("second_image_prob must lie in [0, 1]")
        if not 0 <= self.age_range[0] < self.age_range[1]:
            raise ConfigError("age_range must be increasing and nonnegative")

    def scanner(self, name):
        for s in self.scanners:
            if s.name == name:
                return s
        raise DataError(f"unknown scanner {name!r}; declared: {[s.name for s in self.scanners]}")

    def aspect(self, sex):
        for name, value in self.sex_aspect:
            if name == sex:
                return value
        raise DataError(f"unknown sex {sex!r}; declared: {[s for s, _ in self.sex_aspect]}")

    def schema(self):
        return {
            "scanner": tuple(s.name for s in self.scanners),
            "sex": tuple(s for s, _ in self.sex_aspect),
            "lesion": ("0", "1"),
            "density": tuple(str(i) for i in range(len(self.density_quantiles) + 1)),
        }

    def group_prevalence(self, scanner, sex):
        table = dict(self.prevalence_by_group)
        for key in (f"{scanner}/{sex}", scanner, sex):
            if key in table:
                return table[key]
        return self.prevalence

    def to_dict(self):
        d = asdict(self)
        d["scanners"] = [asdict(s) for s in self.scanners]
        d["sex_aspect"] = dict(self.sex_aspect)
        d["prevalence_by_group"] = dict(self.prevalence_by_group)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        if "scanners" in d:
            d["scanners"] = tuple(ScannerDomain(**s) for s in d["scanners"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class ExogenousNoise:
    """Everything about one image that interventions hold fixed."""

    torso_dx: float
    torso_dy: float
    torso_height: float
    torso_angle: float
    tissue_level: float
    texture_seed: int
    texture_amplitude: float
    lesion_x: float
    lesion_y: float
    lesion_radius: float
    lesion_contrast: float
    obs_seed: int

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class CounterfactualPair:
    factual_record: ImageRecord
    factual: ImageGray
    twin: ImageGray
    intervention: tuple  # ((attribute, value), ...)
    provenance: str

    def __post_init__(self):
        if self.twin.shape != self.factual.shape:
            raise DataError(
                f"twin {self.twin.shape} and factual {self.factual.shape} dimensions differ")
        if self.provenance not in PROVENANCE:
            raise DataError(f"unknown provenance {self.provenance!r}")


class WorldSample(NamedTuple):
    manifest: RecordManifest
    images: np.ndarray  # (n, size, size), row i belongs to manifest.records[i]
    noise: dict  # image_id -> ExogenousNoise

    def index(self):
        return {r.image_id: i for i, r in enumerate(self.manifest.records)}

    def image(self, image_id):
        return ImageGray.from_array(self.images[self.index()[image_id]])


# ---------------------------------------------------------------------------
# mechanisms


def _grid(size):
    # pixel centres in [-1, 1]
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="xy")


def bias_field(size):
    """Fixed smooth field in [-1, 1]."""
    u, v = _grid(size)
    return 0.5 * np.cos(np.pi * u) + 0.5 * np.sin(0.5 * np.pi * v)


def texture_field(seed, size):
    rng = np.random.default_rng(seed)
    u, v = _grid(size)
    freq = rng.uniform(0.5, 2.0, size=(N_TEXTURE_WAVES, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=N_TEXTURE_WAVES)
    weight = rng.uniform(0.5, 1.0, size=N_TEXTURE_WAVES)
    field_ = np.zeros((size, size))
    for (fx, fy), ph, w in zip(freq, phase, weight):
        field_ += w * np.cos(np.pi * (fx * u + fy * v) + ph)
    return field_ / weight.sum()


def _torso_frame(u_noise, aspect, size):
    """Pixel coordinates in the rotated torso frame plus the torso half-axes."""
    u, v = _grid(size)
    x = u - u_noise.torso_dx
    y = v - u_noise.torso_dy
    ca, sa = np.cos(u_noise.torso_angle), np.sin(u_noise.torso_angle)
    ry = u_noise.torso_height
    return ca * x + sa * y, -sa * x + ca * y, ry * aspect, ry


def _smoothstep(d, width):
    t = np.clip((1.0 - d) / width, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def torso_mask(u_noise, aspect, size):
    xr, yr, rx, ry = _torso_frame(u_noise, aspect, size)
    return _smoothstep(np.sqrt((xr / rx) ** 2 + (yr / ry) ** 2), EDGE_WIDTH)


def lung_mask(u_noise, aspect, size):
    xr, yr, rx, ry = _torso_frame(u_noise, aspect, size)
    out = np.zeros((size, size))
    for side in (-1.0, 1.0):
        d = np.sqrt(((xr - side * LUNG_OFFSET[0] * rx) / (LUNG_RADII[0] * rx)) ** 2
                    + ((yr - LUNG_OFFSET[1] * ry) / (LUNG_RADII[1] * ry)) ** 2)
        out = np.maximum(out, _smoothstep(d, LUNG_EDGE))
    return out


def lesion_centre(u_noise, aspect):
    """Image coordinates of the lesion centre; it sits in the right-hand lung."""
    ry = u_noise.torso_height
    rx = ry * aspect
    lx = (LUNG_OFFSET[0] + LESION_WINDOW[0] * u_noise.lesion_x) * rx
    ly = (LUNG_OFFSET[1] + LESION_WINDOW[1] * u_noise.lesion_y) * ry
    ca, sa = np.cos(u_noise.torso_angle), np.sin(u_noise.torso_angle)
    return u_noise.torso_dx + ca * lx - sa * ly, u_noise.torso_dy + sa * lx + ca * ly


def lesion_bump(centre, radius, contrast, size):
    u, v = _grid(size)
    r2 = ((u - centre[0]) ** 2 + (v - centre[1]) ** 2) / radius ** 2
    return np.where(r2 < 1.0, contrast * (1.0 - r2) ** 2, 0.0)


def lung_level(tissue_level):
    q = (tissue_level - LEVEL_RANGE[0]) / (LEVEL_RANGE[1] - LEVEL_RANGE[0])
    return LUNG_RANGE[0] + q * (LUNG_RANGE[1] - LUNG_RANGE[0])


def render_anatomy_array(u_noise, aspect, lesion, size):
    tex = u_noise.texture_amplitude * texture_field(u_noise.texture_seed, size)
    lungs = lung_mask(u_noise, aspect, size)
    soft = SOFT_TISSUE + tex
    tissue = soft + lungs * (lung_level(u_noise.tissue_level) + LUNG_TEXTURE * tex - soft)
    a = BACKGROUND + torso_mask(u_noise, aspect, size) * (tissue - BACKGROUND)
    if lesion:
        a = a + lesion_bump(lesion_centre(u_noise, aspect), u_noise.lesion_radius,
                            u_noise.lesion_contrast, size)
    return a


def render_anatomy(u_noise, sex, label, cfg=None):
    """Noise-free anatomy raster; ``label`` is lesion presence (0/1)."""
    cfg = cfg or WorldConfig()
    a = render_anatomy_array(u_noise, cfg.aspect(sex), bool(label), cfg.image_size)
    return ImageGray.from_array(a)


def transfer_array(a, scanner, size):
    return np.clip(np.power(a, scanner.exponent) + scanner.bias * bias_field(size), 0.0, 1.0)


def invert_array(x, scanner, size):
    base = np.clip(x - scanner.bias * bias_field(size), 0.0, 1.0)
    return np.power(base, 1.0 / scanner.exponent)


def _side(img):
    if img.width != img.height:
        raise DataError(f"world images are square; got {img.width}x{img.height}")
    return img.width


def scanner_transfer(a, scanner, cfg):
    return ImageGray.from_array(transfer_array(a.data, cfg.scanner(scanner), _side(a)))


def invert_scanner_transfer(x, scanner, cfg):
    return ImageGray.from_array(invert_array(x.data, cfg.scanner(scanner), _side(x)))


def observation_noise(u_noise, cfg):
    if cfg.noise_floor == 0.0:
        return 0.0
    rng = np.random.default_rng(u_noise.obs_seed)
    return cfg.noise_floor * rng.uniform(-1.0, 1.0, size=(cfg.image_size, cfg.image_size))


def observe_array(u_noise, sex, lesion, scanner, cfg):
    a = render_anatomy_array(u_noise, cfg.aspect(sex), lesion, cfg.image_size)
    x = transfer_array(a, cfg.scanner(scanner), cfg.image_size)
    if cfg.noise_floor:
        x = np.clip(x + observation_noise(u_noise, cfg), 0.0, 1.0)
    return x


def counterfactual_scanner_array(x, source, target, cfg):
    size = x.shape[-1]
    return transfer_array(invert_array(x, cfg.scanner(source), size), cfg.scanner(target), size)


def counterfactual_scanner(x, source, target, cfg):
    """Image-only counterfactual: abduct anatomy under ``source``, re-acquire under ``target``."""
    _side(x)
    return ImageGray.from_array(counterfactual_scanner_array(x.data, source, target, cfg))


def _lesion_of(record):
    try:
        return record.get("lesion") in ("1", 1, True)
    except KeyError:
        return bool(record.label)


def _normalise_intervention(intervention):
    if isinstance(intervention, Mapping):
        return tuple(sorted((str(k), str(v)) for k, v in intervention.items()))
    return tuple(sorted((str(k), str(v)) for k, v in intervention))


def oracle_twin_array(record, u_noise, intervention, cfg):
    """Twin pixels only; the intervention is not validated here."""
    target = dict(_normalise_intervention(intervention))
    return observe_array(u_noise, target.get("sex", record.sex), _lesion_of(record),
                         target.get("scanner", record.scanner), cfg)


def counterfactual_oracle(record, u_noise, intervention, cfg):
    """Re-render with stored anatomy noise and the intervened parents."""
    items = _normalise_intervention(intervention)
    schema = cfg.schema()
    for attr, value in items:
        if attr not in schema:
            raise DataError(f"cannot intervene on {attr!r}: not in the attribute schema")
        if attr not in INTERVENABLE:
            raise DataError(f"attribute {attr!r} has no mechanism to intervene on")
        if value not in schema[attr]:
            raise DataError(f"{attr}={value!r} outside declared domain {list(schema[attr])}")
    factual = observe_array(u_noise, record.sex, _lesion_of(record), record.scanner, cfg)
    twin = oracle_twin_array(record, u_noise, items, cfg)
    return CounterfactualPair(record, ImageGray.from_array(factual), ImageGray.from_array(twin),
                              items, "oracle-noise")


# ---------------------------------------------------------------------------
# sampling


def _sample_noise(rng, cfg):
    lo, hi = AMPLITUDE_RANGE
    return ExogenousNoise(
        torso_dx=float(rng.uniform(-0.06, 0.06)),
        torso_dy=float(rng.uniform(-0.06, 0.06)),
        torso_height=float(rng.uniform(0.72, 0.85)),
        torso_angle=float(rng.uniform(-0.12, 0.12)),
        tissue_level=float(rng.uniform(*LEVEL_RANGE)),
        texture_seed=int(rng.integers(0, 2 ** 31 - 1)),
        texture_amplitude=float(rng.uniform(lo, hi)),
        lesion_x=float(rng.uniform(-1.0, 1.0)),
        lesion_y=float(rng.uniform(-1.0, 1.0)),
        lesion_radius=float(rng.uniform(*RADIUS_RANGE)),
        lesion_contrast=float(rng.uniform(*CONTRAST_RANGE)),
        obs_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def density_level(amplitude, cfg):
    lo, hi = AMPLITUDE_RANGE
    q = (amplitude - lo) / (hi - lo)
    return int(np.searchsorted(np.asarray(cfg.density_quantiles), q, side="right"))


def _weights(w, k):
    if w is None:
        return np.full(k, 1.0 / k)
    w = np.asarray(w, dtype=np.float64)
    return w / w.sum()


def sample_world(cfg, n):
    """Draw ``n`` images with records and stored anatomy noise; pure in (cfg, n)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    scanner_names = [s.name for s in cfg.scanners]
    sexes = [s for s, _ in cfg.sex_aspect]
    p_scanner = _weights(cfg.scanner_weights, len(scanner_names))
    p_sex = _weights(cfg.sex_weights, len(sexes))
    age_mid = 0.5 * (cfg.age_range[0] + cfg.age_range[1])
    width = len(str(n))
    records, noise = [], {}
    images = np.empty((n, cfg.image_size, cfg.image_size))
    patient = 0
    i = 0
    while i < n:
        pid = f"P{patient:0{width}d}"
        patient += 1
        scanner = scanner_names[rng.choice(len(scanner_names), p=p_scanner)]
        sex = sexes[rng.choice(len(sexes), p=p_sex)]
        age = round(float(rng.uniform(*cfg.age_range)), 1)
        count = 2 if rng.random() < cfg.second_image_prob else 1
        prev = np.clip(cfg.group_prevalence(scanner, sex) + cfg.age_slope * (age - age_mid), 0.0, 1.0)
        for _ in range(min(count, n - i)):
            u = _sample_noise(rng, cfg)
            lesion = bool(rng.random() < prev)
            image_id = f"img{i:0{width}d}"
            images[i] = observe_array(u, sex, lesion, scanner, cfg)
            records.append(ImageRecord(
                image_id=image_id, patient_id=pid, source=f"{image_id}.pgm", label=int(lesion),
                scanner=scanner, sex=sex, age=age,
                extra=(("lesion", str(int(lesion))),
                       ("density", str(density_level(u.texture_amplitude, cfg)))),
            ))
            noise[image_id] = u
            i += 1
    images.setflags(write=False)
    return WorldSample(RecordManifest(records, 2, cfg.schema()), images, noise)


def relabel(manifest, attribute, class_count):
    """Copy of ``manifest`` whose label is taken from an extra attribute (e.g. density)."""
    records = [r.with_attributes(label=int(r.get(attribute))) for r in manifest.records]
    return RecordManifest(records, class_count, manifest.attribute_schema)


# ---------------------------------------------------------------------------
# external counterfactuals

PAIR_COLUMNS = ("factual_id", "twin_source", "attribute", "value")


def ingest_counterfactual_pairs(pairs_csv, manifest, images):
    """Validate externally generated pairs against ``manifest``.

    ``images`` maps keys to :class:`ImageGray`; factual images are looked up by
    image_id (falling back to the record's source) and twins by twin_source.
    """
    if isinstance(pairs_csv, bytes):
        pairs_csv = pairs_csv.decode("utf-8")
    try:
        rows = list(csv.reader(io.StringIO(pairs_csv, newline=""), strict=True))
    except csv.Error as exc:
        raise DataError(f"malformed pairs CSV: {exc}") from None
    if not rows or tuple(h.strip() for h in rows[0]) != PAIR_COLUMNS:
        raise DataError(f"pairs CSV header must be {','.join(PAIR_COLUMNS)}")
    by_id = manifest.by_id()
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(PAIR_COLUMNS):
            raise DataError(f"pairs line {lineno}: expected 4 fields, got {len(row)}")
        factual_id, twin_source, attr, value = row
        if factual_id not in by_id:
            raise DataError(f"pairs line {lineno}: unknown factual id {factual_id!r}")
        domain = manifest.attribute_schema.get(attr)
        if domain is None:
            raise DataError(f"pairs line {lineno}: attribute {attr!r} not in schema")
        if value not in domain:
            raise DataError(f"pairs line {lineno}: {attr}={value!r} outside declared domain {list(domain)}")
        record = by_id[factual_id]
        factual = lookup_image(images, factual_id, record.source)
        twin = lookup_image(images, twin_source)
        if twin.shape != factual.shape:
            raise DataError(
                f"pairs line {lineno}: twin {twin.width}x{twin.height} does not match "
                f"factual {factual.width}x{factual.height}")
        out.append(CounterfactualPair(record, factual, twin, ((attr, value),), "external"))
    return out


def lookup_image(images, *keys):
    """First of ``keys`` found in ``images``; DataError names the first key."""
    for key in keys:
        try:
            return images[key]
        except KeyError:
            continue
    raise DataError(f"image not found in store: {keys[0]!r}")


@dataclass
class DirectoryImageStore(Mapping):
    """Read-only mapping of keys to PGM files under ``root`` (``.pgm`` optional)."""

    root: str
    _cache: dict = field(default_factory=dict, repr=False)

    def _path(self, key):
        base = Path(self.root)
        for cand in (base / key, base / f"{key}.pgm"):
            if cand.is_file():
                return cand
        raise KeyError(key)

    def __getitem__(self, key):
        if key not in self._cache:
            self._cache[key] = read_pgm(self._path(key))
        return self._cache[key]

    def __iter__(self):
        return (p.name for p in sorted(Path(self.root).glob("*.pgm")))

    def __len__(self):
        return sum(1 for _ in self)
