"""Desk-scale classifiers (softmax regression, one-hidden-layer tanh MLP).

Training follows the usual recipe: mean cross-entropy, Adam, per-epoch
shuffling from the run seed, early stopping on validation loss with the
best-epoch weights restored. Score tables bridge to models trained elsewhere.
"""

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from cfstress.errors import ConfigError, DataError, NumericError
from cfstress.imaging import ImageGray, blur_array

KINDS = ("logistic", "mlp")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "logistic"
    input_side: int = 32
    hidden_units: int = 64
    class_count: int = 2
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    augment: bool = False
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown classifier kind {self.kind!r}; expected one of {KINDS}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.input_side < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.hidden_units < 1:
            raise ConfigError("input_side, batch_size, max_epochs and hidden_units must be >= 1")

    @property
    def n_features(self):
        return self.input_side * self.input_side

    def n_weights(self):
        d, k, h = self.n_features, self.class_count, self.hidden_units
        if self.kind == "logistic":
            return k * d + k
        return h * d + h + k * h + k

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed):
        return ClassifierSpec(**{**asdict(self), "seed": int(seed)})


@dataclass(frozen=True, eq=False)
class LabeledImages:
    ids: tuple
    images: np.ndarray  # (n, h, w)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 2 and len(self.ids) == 1:
            images = images[None]
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 3 or images.shape[0] != len(self.ids) or labels.shape != (len(self.ids),):
            raise DataError("ids, images and labels must have matching lengths")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_records(cls, records, lookup):
        """``lookup(record)`` returns an ImageGray or (h, w) array."""
        arrays = [getattr(img, "data", img) for img in (lookup(r) for r in records)]
        shape = (0, 1, 1) if not arrays else None
        images = np.stack(arrays) if arrays else np.empty(shape)
        return cls(tuple(r.image_id for r in records), images, [r.label for r in records])

    def canonical(self):
        """Same data ordered by image_id so results ignore storage order."""
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        return LabeledImages(tuple(self.ids[i] for i in order), self.images[order], self.labels[order])

    def with_images(self, images):
        return LabeledImages(self.ids, images, self.labels)


# ---------------------------------------------------------------------------
# features and augmentation


def _area_matrix(n_in, n_out):
    """Row i averages the input interval covered by output cell i."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / scale
    return m


def features_array(stack, input_side):
    """Area-averaged downsample to input_side^2, then per-image standardisation."""
    if input_side < 1:
        raise ValueError("input_side must be >= 1")
    stack = np.asarray(stack, dtype=np.float64)
    single = stack.ndim == 2
    if single:
        stack = stack[None]
    n, h, w = stack.shape
    if h < 1 or w < 1:
        raise DataError("cannot extract features from an empty image")
    rows = _area_matrix(h, input_side)
    cols = _area_matrix(w, input_side)
    small = (rows @ stack @ cols.T).reshape(n, -1)
    small = small - small.mean(axis=1, keepdims=True)
    std = small.std(axis=1, keepdims=True)
    small = small / np.where(std < 1e-8, 1.0, std)
    return small[0] if single else small


def extract_features(img, input_side=32):
    return features_array(img.data, input_side)


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    rotate_p: float = 1.0
    max_rotation_deg: float = 10.0
    jitter_p: float = 1.0
    brightness_range: tuple = (0.9, 1.1)
    blur_p: float = 0.25
    blur_kernel: int = 3
    blur_sigma: float = 0.7
    erase_p: float = 0.25
    erase_area: tuple = (0.02, 0.08)

    @classmethod
    def disabled(cls):
        return cls(flip_p=0.0, rotate_p=0.0, jitter_p=0.0, blur_p=0.0, erase_p=0.0)


def augment_array(a, seed, cfg=AugmentConfig()):
    rng = np.random.default_rng(seed)
    out = np.array(a, dtype=np.float64)
    # draw every variate up front so the stream does not depend on which steps fire
    u = rng.random(5)
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    gain = rng.uniform(*cfg.brightness_range)
    area = rng.uniform(*cfg.erase_area) * out.size
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    corner = rng.random(2)
    if u[0] < cfg.flip_p:
        out = out[:, ::-1]
    if u[1] < cfg.rotate_p:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="constant", cval=0.0)
    if u[2] < cfg.jitter_p:
        out = out * gain
    out = np.clip(out, 0.0, 1.0)
    if u[3] < cfg.blur_p:
        out = blur_array(out, cfg.blur_kernel, cfg.blur_sigma)
    if u[4] < cfg.erase_p:
        h, w = out.shape
        eh = int(min(h, max(1, round(math.sqrt(area * aspect)))))
        ew = int(min(w, max(1, round(area / eh))))
        top = int(corner[0] * (h - eh + 1))
        left = int(corner[1] * (w - ew + 1))
        out[top:top + eh, left:left + ew] = 0.0
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def augment(img, seed, cfg=AugmentConfig()):
    return ImageGray.from_array(augment_array(img.data, seed, cfg))


# ---------------------------------------------------------------------------
# models


def _unpack(spec, weights):
    d, k, h = spec.n_features, spec.class_count, spec.hidden_units
    if spec.kind == "logistic":
        return weights[:k * d].reshape(k, d), weights[k * d:]
    i = 0
    w1 = weights[i:i + h * d].reshape(h, d); i += h * d
    b1 = weights[i:i + h]; i += h
    w2 = weights[i:i + k * h].reshape(k, h); i += k * h
    b2 = weights[i:i + k]
    return w1, b1, w2, b2


def init_weights(spec, rng):
    if spec.kind == "logistic":
        return np.zeros(spec.n_weights())
    d, k, h = spec.n_features, spec.class_count, spec.hidden_units
    lim1 = math.sqrt(6.0 / (d + h))
    lim2 = math.sqrt(6.0 / (h + k))
    return np.concatenate([
        rng.uniform(-lim1, lim1, h * d), np.zeros(h),
        rng.uniform(-lim2, lim2, k * h), np.zeros(k),
    ])


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logits(spec, weights, x):
    parts = _unpack(spec, weights)
    if spec.kind == "logistic":
        w, b = parts
        return x @ w.T + b
    w1, b1, w2, b2 = parts
    return np.tanh(x @ w1.T + b1) @ w2.T + b2


def predict_proba(spec, weights, x):
    return _softmax(logits(spec, weights, x))


def loss(spec, weights, x, y):
    z = logits(spec, weights, x)
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_p[np.arange(len(y)), y].mean())


def loss_and_grad(spec, weights, x, y):
    """Mean cross-entropy and its gradient w.r.t. the flat weight vector."""
    n = len(y)
    parts = _unpack(spec, weights)
    if spec.kind == "logistic":
        w, b = parts
        z = x @ w.T + b
    else:
        w1, b1, w2, b2 = parts
        hidden = np.tanh(x @ w1.T + b1)
        z = hidden @ w2.T + b2
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    value = float(-log_p[np.arange(n), y].mean())
    dz = np.exp(log_p)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    if spec.kind == "logistic":
        return value, np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
    dhidden = (dz @ w2) * (1.0 - hidden * hidden)
    return value, np.concatenate([
        (dhidden.T @ x).ravel(), dhidden.sum(axis=0),
        (dz.T @ hidden).ravel(), dz.sum(axis=0),
    ])


@dataclass(frozen=True, eq=False)
class TrainedModel:
    spec: ClassifierSpec
    weights: np.ndarray
    val_loss_curve: tuple
    stopped_epoch: int
    best_epoch: int
    warnings: tuple = field(default=())

    @property
    def model_id(self):
        return f"{self.spec.kind}-{self.spec.digest()[:12]}"

    def predict_proba(self, x):
        return predict_proba(self.spec, self.weights, x)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "weights.bin").write_bytes(np.asarray(self.weights, dtype="<f8").tobytes())
        meta = {
            "spec": asdict(self.spec),
            "val_loss_curve": list(self.val_loss_curve),
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "warnings": list(self.warnings),
            "model_id": self.model_id,
        }
        (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            meta = json.loads((directory / "model.json").read_text())
            weights = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f8").astype(np.float64)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load model from {directory}: {exc}") from None
        spec = ClassifierSpec(**meta["spec"])
        if weights.size != spec.n_weights():
            raise DataError(f"weights file has {weights.size} values, spec needs {spec.n_weights()}")
        return cls(spec, weights, tuple(meta["val_loss_curve"]), meta["stopped_epoch"],
                   meta["best_epoch"], tuple(meta.get("warnings", ())))


def _check_split(data, spec, name):
    if len(data) == 0:
        raise DataError(f"{name} set is empty")
    if data.labels.min() < 0 or data.labels.max() >= spec.class_count:
        raise DataError(f"{name} labels must lie in 0..{spec.class_count - 1}")


def train_classifier(train, val, spec, augment_cfg=None):
    """Fit ``spec`` on ``train`` with early stopping on ``val``.

    Data is put in image_id order first, so the seed alone fixes the batch
    sequence whatever order the caller supplies.
    """
    _check_split(train, spec, "train")
    _check_split(val, spec, "val")
    train = train.canonical()
    val = val.canonical()
    notes = []
    missing = sorted(set(range(spec.class_count)) - set(train.labels.tolist()))
    if missing:
        msg = f"classes {missing} absent from the training set"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)

    init_seq, shuffle_seq, aug_seq = np.random.SeedSequence(spec.seed).spawn(3)
    weights = init_weights(spec, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    aug_rng = np.random.default_rng(aug_seq)
    aug_cfg = augment_cfg or AugmentConfig()

    x_train = features_array(train.images, spec.input_side)
    x_val = features_array(val.images, spec.input_side)
    y_train, y_val = train.labels, val.labels

    m = np.zeros_like(weights)
    v = np.zeros_like(weights)
    step = 0
    best_loss = math.inf
    best_weights = weights.copy()
    best_epoch = 0
    since_best = 0
    curve = []
    epoch = 0
    for epoch in range(1, spec.max_epochs + 1):
        if spec.augment:
            seeds = aug_rng.integers(0, 2 ** 63 - 1, size=len(train))
            x_epoch = features_array(
                np.stack([augment_array(img, s, aug_cfg) for img, s in zip(train.images, seeds)]),
                spec.input_side)
        else:
            x_epoch = x_train
        perm = shuffle_rng.permutation(len(train))
        for batch, start in enumerate(range(0, len(perm), spec.batch_size)):
            idx = perm[start:start + spec.batch_size]
            value, grad = loss_and_grad(spec, weights, x_epoch[idx], y_train[idx])
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch}")
            step += 1
            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad * grad
            m_hat = m / (1 - ADAM_BETA1 ** step)
            v_hat = v / (1 - ADAM_BETA2 ** step)
            weights = weights - spec.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        val_loss = loss(spec, weights, x_val, y_val)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        curve.append(val_loss)
        if val_loss < best_loss - spec.min_delta:
            best_loss = val_loss
            best_weights = weights.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= spec.patience:
                break
    return TrainedModel(spec, best_weights, tuple(curve), epoch, best_epoch, tuple(notes))


# ---------------------------------------------------------------------------
# score tables


@dataclass(frozen=True)
class ScoreRow:
    image_id: str
    model_id: str
    seed: int
    condition: str
    scores: tuple


@dataclass(frozen=True)
class ScoreTable:
    rows: tuple = ()
    class_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        for r in self.rows:
            if len(r.scores) != self.class_count:
                raise DataError(f"row for {r.image_id!r} has {len(r.scores)} scores, expected {self.class_count}")
            if not all(math.isfinite(s) for s in r.scores):
                raise DataError(f"non-finite score for {r.image_id!r}")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __add__(self, other):
        if self.rows and other.rows and self.class_count != other.class_count:
            raise DataError("cannot concatenate score tables with different class counts")
        k = self.class_count if self.rows else other.class_count
        return ScoreTable(self.rows + other.rows, k)


def predict_scores(model, images, condition, image_ids=None):
    """Softmax scores per image tagged with ``condition``.

    ``images`` is a LabeledImages, a mapping of id -> ImageGray, or an
    (n, h, w) stack together with ``image_ids``.
    """
    if isinstance(images, LabeledImages):
        ids, stack = images.ids, images.images
    elif isinstance(images, dict):
        ids = tuple(images)
        stack = np.stack([images[i].data for i in ids]) if ids else np.empty((0, 1, 1))
    else:
        ids, stack = tuple(image_ids), np.asarray(images, dtype=np.float64)
    k = model.spec.class_count
    if len(ids) == 0:
        return ScoreTable((), k)
    x = features_array(stack, model.spec.input_side)
    if x.shape[1] != model.spec.n_features:  # pragma: no cover - resampling always fits
        raise DataError("feature dimension mismatch")
    proba = model.predict_proba(x)
    mid, seed = model.model_id, model.spec.seed
    rows = tuple(ScoreRow(i, mid, seed, condition, tuple(float(v) for v in p)) for i, p in zip(ids, proba))
    return ScoreTable(rows, k)


def export_scores(table):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "model_id", "seed", "condition"]
                    + [f"score_{c}" for c in range(table.class_count)])
    for r in table.rows:
        writer.writerow([r.image_id, r.model_id, str(r.seed), r.condition]
                        + [format(s, ".17g") for s in r.scores])
    return buf.getvalue()


def import_scores(text):
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        rows = list(csv.reader(io.StringIO(text, newline=""), strict=True))
    except csv.Error as exc:
        raise DataError(f"malformed score CSV: {exc}") from None
    if not rows:
        raise DataError("score CSV is empty")
    header = rows[0]
    if header[:4] != ["image_id", "model_id", "seed", "condition"]:
        raise DataError("score CSV header must start with image_id,model_id,seed,condition")
    k = len(header) - 4
    if k < 2 or header[4:] != [f"score_{c}" for c in range(k)]:
        raise DataError("score columns must be score_0..score_{K-1} with K >= 2")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"score CSV line {lineno}: ragged row ({len(row)} fields, expected {len(header)})")
        try:
            seed = int(row[2])
            scores = tuple(float(s) for s in row[4:])
        except ValueError as exc:
            raise DataError(f"score CSV line {lineno}: {exc}") from None
        if not all(math.isfinite(s) for s in scores):
            raise DataError(f"score CSV line {lineno}: non-finite score")
        out.append(ScoreRow(row[0], row[1], seed, row[3], scores))
    return ScoreTable(tuple(out), k)
