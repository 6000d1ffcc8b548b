"""Ranking metrics, performance shifts and stress-test/OOD agreement statistics."""

import math
from dataclasses import dataclass

import numpy as np

from cfstress import _kernels
from cfstress.errors import DataError

METRIC_KINDS = ("AP", "AUC_macro_ovr")
IID = "IID"
OOD = "OOD"
CF = "CF"


# ---------------------------------------------------------------------------
# ranking metrics


def _binary_inputs(labels, scores):
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError(f"labels and scores must be equal-length vectors, got {y.shape} and {s.shape}")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be binary (0/1)")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return y.astype(bool), s


def average_precision(labels, scores):
    """Step-interpolated AP; tied scores form one block evaluated at its end."""
    y, s = _binary_inputs(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    ends = np.append(np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1)
    tp_end = tp[ends]
    precision = tp_end / (ends + 1.0)
    recall = tp_end / n_pos
    recall_steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(recall_steps * precision))


def _midranks(s):
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    starts = np.flatnonzero(np.concatenate(([True], s_sorted[1:] != s_sorted[:-1])))
    ends = np.append(starts[1:], len(s))
    # 1-based average rank of each tie block, multiples of 0.5 so exact in float
    block_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(block_rank, ends - starts)
    return ranks


def roc_auc_binary(labels, scores):
    """Mann-Whitney AUC with ties counted as one half."""
    y, s = _binary_inputs(labels, scores)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    rank_sum = _midranks(s)[y].sum()
    # rank_sum - P(P+1)/2 equals #(pos>neg) + 0.5 * #(pos=neg) exactly
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_ovr_auc(labels, score_vectors):
    """Unweighted mean of one-vs-rest AUCs over all K classes."""
    y = np.asarray(labels)
    sv = np.asarray(score_vectors, dtype=np.float64)
    if sv.ndim != 2 or sv.shape[0] != len(y):
        raise ValueError("score_vectors must be an (n, K) array matching labels")
    k = sv.shape[1]
    absent = [c for c in range(k) if not np.any(y == c)]
    if absent:
        raise ValueError(f"classes absent from labels: {absent}")
    return float(np.mean([roc_auc_binary((y == c).astype(int), sv[:, c]) for c in range(k)]))


def metric_value(kind, labels, score_vectors):
    sv = np.asarray(score_vectors, dtype=np.float64)
    if kind == "AP":
        return average_precision(labels, sv[:, 1] if sv.ndim == 2 else sv)
    if kind == "AUC_macro_ovr":
        return macro_ovr_auc(labels, sv)
    raise ValueError(f"unknown metric kind {kind!r}")


# ---------------------------------------------------------------------------
# shifts


@dataclass(frozen=True)
class ShiftResult:
    model_id: str
    seed: int
    domain: str
    condition: str
    metric: str
    value: float
    delta_vs_iid: float

    @property
    def pair_key(self):
        return (self.model_id, self.seed, self.domain)


def make_condition_tag(domain, condition):
    return f"{domain}/{condition}" if domain else condition


def split_condition_tag(tag):
    domain, _, condition = tag.rpartition("/")
    return domain, condition


def shift_deltas(table, labels, metric, iid_condition=IID):
    """Metric per (model_id, seed, domain, condition) and its delta vs IID.

    ``table`` is any iterable of score rows (``image_id``, ``model_id``,
    ``seed``, ``condition``, ``scores``); ``labels`` maps image_id to class.
    """
    if metric not in METRIC_KINDS:
        raise ValueError(f"unknown metric kind {metric!r}")
    groups = {}
    for row in table:
        domain, condition = split_condition_tag(row.condition)
        key = (row.model_id, row.seed, domain, condition)
        groups.setdefault(key, []).append(row)
    values = {}
    for key, rows in groups.items():
        try:
            y = [labels[r.image_id] for r in rows]
        except KeyError as exc:
            raise DataError(f"no label for image {exc.args[0]!r}") from None
        values[key] = metric_value(metric, y, [r.scores for r in rows])
    out = []
    for (model_id, seed, domain, condition), value in sorted(values.items()):
        base_key = (model_id, seed, domain, iid_condition)
        if base_key not in values:
            raise DataError(
                f"missing {iid_condition} baseline for model={model_id} seed={seed} domain={domain!r}")
        delta = 0.0 if condition == iid_condition else value - values[base_key]
        out.append(ShiftResult(model_id, seed, domain, condition, metric, value, delta))
    return out


def _pair_up(stress, ood):
    def index(results, what):
        d = {}
        for r in results:
            if r.pair_key in d:
                raise DataError(f"duplicate {what} observation for {r.pair_key}")
            d[r.pair_key] = r.delta_vs_iid
        return d

    a = index(stress, "stress")
    b = index(ood, "OOD")
    if set(a) != set(b):
        unmatched = sorted(set(a) ^ set(b))
        raise DataError(f"unmatched pair keys: {unmatched[:5]}{' ...' if len(unmatched) > 5 else ''}")
    keys = sorted(a)
    return keys, np.array([a[k] for k in keys]), np.array([b[k] for k in keys])


def mae_of_shifts(stress, ood):
    """Mean and population std of |delta_stress - delta_ood| over paired runs."""
    _, x, y = _pair_up(stress, ood)
    if len(x) == 0:
        raise DataError("no paired observations")
    err = np.abs(x - y)
    return float(err.mean()), float(err.std())


# ---------------------------------------------------------------------------
# correlation statistics


def _betacf(a, b, x):
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 100000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        step = d * c
        h *= step
        if abs(step - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a, b, x, xc=None):
    """Regularized incomplete beta I_x(a, b); ``xc`` optionally supplies 1 - x exactly."""
    if xc is None:
        xc = 1.0 - x
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(xc))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, xc) / b


def _vectors(x, y, min_n):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    if len(x) < min_n:
        raise ValueError(f"need at least {min_n} observations, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("x and y must be finite")
    return x, y


def pearson_with_p(x, y):
    """Sample Pearson r and two-sided p from Student-t with n-2 dof."""
    x, y = _vectors(x, y, 3)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("Pearson correlation is undefined for zero-variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    if abs(r) > 1.0 - 1e-14:
        # affine dependence up to rounding
        r = math.copysign(1.0, r)
        return r, 0.0
    df = len(x) - 2
    # with t = r sqrt(df / (1 - r^2)): df / (df + t^2) = 1 - r^2
    p = betainc_regularized(df / 2.0, 0.5, (1.0 - r) * (1.0 + r), r * r)
    return r, min(1.0, max(0.0, p))


def _tie_sums(v):
    _, counts = np.unique(v, return_counts=True)
    t = counts[counts > 1].astype(np.float64)
    return (float(np.sum(t * (t - 1))),
            float(np.sum(t * (t - 1) * (t - 2))),
            float(np.sum(t * (t - 1) * (2 * t + 5))))


def kendall_tau_b_with_p(x, y):
    """Kendall tau-b; two-sided p from the normal approximation with tie-adjusted variance."""
    x, y = _vectors(x, y, 2)
    n = len(x)
    concordant, discordant, tied_x, tied_y = _kernels.pair_counts(x, y)
    n0 = n * (n - 1) // 2
    if tied_x == n0 or tied_y == n0:
        raise ValueError("Kendall tau-b is undefined when x or y is constant")
    tau = (concordant - discordant) / math.sqrt((n0 - tied_x) * (n0 - tied_y))
    tau = min(1.0, max(-1.0, tau))
    xt1, xt2, xt3 = _tie_sums(x)
    yt1, yt2, yt3 = _tie_sums(y)
    var = (n * (n - 1) * (2 * n + 5) - xt3 - yt3) / 18.0
    var += xt1 * yt1 / (2.0 * n * (n - 1))
    if n > 2:
        var += xt2 * yt2 / (9.0 * n * (n - 1) * (n - 2))
    z = (concordant - discordant) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return tau, min(1.0, max(0.0, p))


# ---------------------------------------------------------------------------
# agreement


@dataclass(frozen=True)
class AgreementStats:
    method: str
    scope: str  # "pooled" or a domain tag
    n: int
    mae: float
    mae_std: float
    pearson_r: float
    pearson_p: float
    kendall_tau: float
    kendall_p: float
    note: str = ""


def agreement_stats(stress, ood, method, scope="pooled"):
    """Compare stress-test shifts with real OOD shifts over paired runs.

    Correlations that are undefined for the data (too few pairs, constant
    input) are reported as NaN with an explanatory note rather than raising.
    """
    keys, a, b = _pair_up(stress, ood)
    if len(keys) < 2:
        raise DataError(f"{method}/{scope}: need >= 2 paired observations, got {len(keys)}")
    err = np.abs(a - b)
    notes = []
    try:
        r, rp = pearson_with_p(a, b)
    except ValueError as exc:
        r, rp = math.nan, math.nan
        notes.append(f"pearson: {exc}")
    try:
        tau, tp = kendall_tau_b_with_p(a, b)
    except ValueError as exc:
        tau, tp = math.nan, math.nan
        notes.append(f"kendall: {exc}")
    return AgreementStats(method, scope, len(keys), float(err.mean()), float(err.std()),
                          r, rp, tau, tp, "; ".join(notes))
