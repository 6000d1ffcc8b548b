"""Image records, patient-wise splitting, subgroup filters and test-set matching."""

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from cfstress.errors import DataError

SPLITS = ("train", "val", "test", "unassigned")
REQUIRED_COLUMNS = ("image_id", "patient_id", "source", "label")
OPTIONAL_COLUMNS = ("scanner", "sex", "age", "split")
# attributes a predicate may reference without being declared in the schema
BUILTIN_ATTRIBUTES = ("image_id", "patient_id", "source", "label", "scanner", "sex", "age", "split")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    source: str
    label: int
    scanner: str = None
    sex: str = None
    age: float = None
    split: str = "unassigned"
    extra: tuple = ()  # ((column, value), ...) for columns we do not interpret

    def get(self, name):
        if name in BUILTIN_ATTRIBUTES:
            return getattr(self, name)
        for key, value in self.extra:
            if key == name:
                return value
        raise KeyError(name)

    def with_attributes(self, **changes):
        builtin = {k: v for k, v in changes.items() if k in BUILTIN_ATTRIBUTES}
        rest = {k: v for k, v in changes.items() if k not in BUILTIN_ATTRIBUTES}
        rec = replace(self, **builtin)
        if rest:
            extra = dict(self.extra)
            extra.update({k: str(v) for k, v in rest.items()})
            rec = replace(rec, extra=tuple(extra.items()))
        return rec


@dataclass(frozen=True)
class RecordManifest:
    records: tuple
    class_count: int
    attribute_schema: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.class_count < 2:
            raise DataError(f"class_count must be >= 2, got {self.class_count}")
        seen = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise DataError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            if not 0 <= rec.label < self.class_count:
                raise DataError(
                    f"label {rec.label} of {rec.image_id!r} outside 0..{self.class_count - 1}")
            if rec.split not in SPLITS:
                raise DataError(f"unknown split {rec.split!r} for {rec.image_id!r}")
            for attr, domain in self.attribute_schema.items():
                try:
                    value = rec.get(attr)
                except KeyError:
                    continue
                if value is not None and value != "" and str(value) not in domain:
                    raise DataError(
                        f"{rec.image_id!r}: {attr}={value!r} not in declared domain {list(domain)}")
        schema = {k: tuple(v) for k, v in self.attribute_schema.items()}
        object.__setattr__(self, "attribute_schema", schema)

    def __len__(self):
        return len(self.records)

    def by_id(self):
        return {r.image_id: r for r in self.records}

    def extra_columns(self):
        cols = []
        for rec in self.records:
            for key, _ in rec.extra:
                if key not in cols:
                    cols.append(key)
        return cols


def _parse_label(raw, image_id):
    try:
        return int(raw.strip(), 10)
    except ValueError:
        raise DataError(f"non-integer label {raw!r} for image {image_id!r}") from None


def parse_manifest(text, class_count=None, attribute_schema=None):
    """Parse a manifest CSV (RFC-4180, comma separated, UTF-8)."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    try:
        rows = list(reader)
    except csv.Error as exc:
        raise DataError(f"malformed CSV: {exc}") from None
    # the csv module tolerates an unterminated quote at EOF; reject it here
    if text.count('"') % 2:
        raise DataError("malformed CSV: unbalanced quotes")
    if not rows:
        raise DataError("manifest is empty (no header row)")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise DataError(f"manifest header missing required columns: {missing}")
    if len(set(header)) != len(header):
        raise DataError("manifest header has duplicate columns")
    known = set(REQUIRED_COLUMNS) | set(OPTIONAL_COLUMNS)
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        cells = dict(zip(header, row))
        image_id = cells["image_id"]
        age = cells.get("age", "")
        try:
            age = float(age) if age != "" else None
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric age {age!r}") from None
        if age is not None and (not math.isfinite(age) or age < 0):
            raise DataError(f"line {lineno}: age must be a nonnegative real, got {age}")
        records.append(ImageRecord(
            image_id=image_id,
            patient_id=cells["patient_id"],
            source=cells["source"],
            label=_parse_label(cells["label"], image_id),
            scanner=cells.get("scanner") or None,
            sex=cells.get("sex") or None,
            age=age,
            split=cells.get("split") or "unassigned",
            extra=tuple((h, cells[h]) for h in header if h not in known),
        ))
    if class_count is None:
        class_count = max(2, max((r.label for r in records), default=0) + 1)
    if attribute_schema is None:
        attribute_schema = infer_schema(records)
    return RecordManifest(records, class_count, attribute_schema)


def infer_schema(records):
    schema = {}
    for attr in ("scanner", "sex"):
        values = sorted({getattr(r, attr) for r in records if getattr(r, attr)})
        if values:
            schema[attr] = tuple(values)
    return schema


def _fmt_age(age):
    return "" if age is None else repr(float(age))


def format_manifest(m):
    """Serialise to the canonical manifest CSV."""
    present = [c for c in OPTIONAL_COLUMNS
               if any(getattr(r, c) not in (None, "", "unassigned") for r in m.records)]
    extras = m.extra_columns()
    header = list(REQUIRED_COLUMNS) + present + extras
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in m.records:
        row = [r.image_id, r.patient_id, r.source, str(r.label)]
        for c in present:
            value = getattr(r, c)
            if c == "age":
                row.append(_fmt_age(value))
            else:
                row.append("" if value is None else str(value))
        extra = dict(r.extra)
        row.extend(extra.get(c, "") for c in extras)
        writer.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# splitting


def patient_hash(patient_id, seed):
    """Keyed 64-bit hash of (seed, patient_id)."""
    key = int(seed).to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(patient_id.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def _split_counts(n_patients, ratios):
    exact = [Fraction(r).limit_denominator(10 ** 12) * n_patients for r in ratios]
    counts = [math.floor(e) for e in exact]
    remainder = n_patients - sum(counts)
    for i, e in enumerate(exact):
        if remainder <= 0:
            break
        if counts[i] < e:
            counts[i] += 1
            remainder -= 1
    # rounding of the ratios themselves may leave a stray patient
    i = 0
    while remainder > 0:
        counts[i % len(counts)] += 1
        remainder -= 1
        i += 1
    return counts


def split_by_patient(m, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign every patient to train/val/test by a keyed hash ordering."""
    if not m.records:
        raise DataError("cannot split an empty manifest")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, val, test)")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be nonnegative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    patients = sorted({r.patient_id for r in m.records},
                      key=lambda p: (patient_hash(p, seed), p))
    counts = _split_counts(len(patients), ratios)
    assignment = {}
    start = 0
    for name, count in zip(("train", "val", "test"), counts):
        for p in patients[start:start + count]:
            assignment[p] = name
        start += count
    records = [replace(r, split=assignment[r.patient_id]) for r in m.records]
    return RecordManifest(records, m.class_count, m.attribute_schema)


# ---------------------------------------------------------------------------
# filtering and matching


def filter_subgroup(m, predicate, split=None):
    """Records whose attributes equal every entry of ``predicate`` (and split)."""
    declared = set(BUILTIN_ATTRIBUTES) | set(m.attribute_schema) | set(m.extra_columns())
    unknown = sorted(set(predicate) - declared)
    if unknown:
        raise DataError(f"unknown attribute(s) in predicate: {unknown}")
    if split is not None and split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    out = []
    for rec in m.records:
        if split is not None and rec.split != split:
            continue
        ok = True
        for attr, want in predicate.items():
            try:
                have = rec.get(attr)
            except KeyError:
                ok = False
                break
            if have is None or str(have) != str(want):
                ok = False
                break
        if ok:
            out.append(rec)
    return out


@dataclass(frozen=True)
class MatchSpec:
    match_prevalence: bool = True
    match_age: bool = True
    age_bin_width: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.age_bin_width > 0:
            raise ValueError("age_bin_width must be > 0")


def _cell(rec, spec):
    label = rec.label if spec.match_prevalence else None
    if spec.match_age:
        if rec.age is None:
            raise DataError(f"record {rec.image_id!r} has no age but match_age is set")
        age_bin = int(math.floor(rec.age / spec.age_bin_width))
    else:
        age_bin = None
    return (label, age_bin)


def _cell_name(cell, spec):
    parts = []
    if cell[0] is not None:
        parts.append(f"label={cell[0]}")
    if cell[1] is not None:
        lo = cell[1] * spec.age_bin_width
        parts.append(f"age=[{lo:g},{lo + spec.age_bin_width:g})")
    return ",".join(parts)


def _largest_remainder(n, weights, cap=None):
    """Split n across keys in proportion to weights, summing to n.

    Each key gets the floor or ceiling of its exact share. With ``cap`` the
    ceiling is only taken where it stays within the cap.
    """
    keys = sorted(weights)
    total = sum(weights.values())
    exact = {k: Fraction(n * weights[k], total) for k in keys}
    alloc = {k: math.floor(exact[k]) for k in keys}
    left = n - sum(alloc.values())
    open_keys = [k for k in keys if exact[k] > alloc[k] and (cap is None or alloc[k] < cap[k])]
    by_remainder = sorted(open_keys, key=lambda k: (-(exact[k] - alloc[k]), k))
    if left > len(by_remainder):  # pragma: no cover - excluded by the choice of n
        raise DataError(f"cannot apportion {n} records within the available cells")
    for k in by_remainder[:left]:
        alloc[k] += 1
    return alloc


def _apportion(n, ref_counts, available):
    """Allocate n over cells: first per label, then across age bins inside a label.

    Label totals and the within-label bin counts each stay within one of their
    proportional share. A bin only rounds up when the source can supply it.
    """
    by_label = {}
    for c, k in ref_counts.items():
        by_label[c[0]] = by_label.get(c[0], 0) + k
    totals = _largest_remainder(n, by_label)
    alloc = {}
    for lab, size in totals.items():
        cells = {c: k for c, k in ref_counts.items() if c[0] == lab}
        alloc.update(_largest_remainder(size, cells, {c: available[c] for c in cells}))
    return alloc


def match_test_set(source, reference, spec):
    """Subsample ``source`` so its label/age-bin mix matches ``reference``.

    Cells are (label, age bin) when both matchings are on. The output size n is
    the largest with n * p_c <= available_c for every reference cell c. Counts
    are apportioned by largest remainder, per label and then per age bin. Records inside a
    cell are drawn uniformly without replacement with ``spec.seed``; the result
    keeps source order.
    """
    if not source or not reference:
        raise DataError("match_test_set needs nonempty source and reference")
    if not (spec.match_prevalence or spec.match_age):
        return list(source)
    ref_counts = {}
    for rec in reference:
        c = _cell(rec, spec)
        ref_counts[c] = ref_counts.get(c, 0) + 1
    pools = {}
    for i, rec in enumerate(source):
        pools.setdefault(_cell(rec, spec), []).append(i)
    total = len(reference)
    deficient = sorted(c for c in ref_counts if not pools.get(c))
    if deficient:
        names = "; ".join(_cell_name(c, spec) for c in deficient)
        raise DataError(f"cannot match test set: no source records in cell(s) {names}")
    n = min(len(pools[c]) * total // ref_counts[c] for c in ref_counts)
    n = min(n, len(source))
    if n == 0:
        raise DataError("cannot match test set: achievable size is 0")
    alloc = _apportion(n, ref_counts, {c: len(pools[c]) for c in ref_counts})
    rng = np.random.default_rng(spec.seed)
    chosen = []
    for c in sorted(alloc):
        pool = pools[c]
        k = alloc[c]
        if k > len(pool):  # pragma: no cover - excluded by the choice of n
            raise DataError(f"cell {_cell_name(c, spec)} short by {k - len(pool)}")
        picks = rng.choice(len(pool), size=k, replace=False) if k < len(pool) else np.arange(k)
        chosen.extend(pool[j] for j in picks)
    return [source[i] for i in sorted(chosen)]
