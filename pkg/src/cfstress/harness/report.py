"""Report serialisation (JSON, CSV tables) and the per-domain SVG bar chart."""

import csv
import io
import json
import math
from dataclasses import asdict, fields
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from cfstress import metrics as X
from cfstress.errors import DataError
from cfstress.harness.run import RunReport

FORMATS = ("json", "csv")


# ---------------------------------------------------------------------------
# JSON


def _num(x):
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return format(x, ".17g") if math.isfinite(x) else "null"


def _dump(obj, indent=0):
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dump(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_dump(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    return _num(obj)


def report_to_dict(r):
    return {
        "config_digest": r.config_digest,
        "metadata": r.metadata,
        "runs": list(r.runs),
        "shift_results": [asdict(s) for s in r.shift_results],
        "agreement": [asdict(a) for a in r.agreement],
    }


def _floats(d, cls):
    out = {}
    for f in fields(cls):
        v = d[f.name]
        if f.type is float:
            v = math.nan if v is None else float(v)
        out[f.name] = v
    return cls(**out)


def report_from_json(blob):
    """Parse what :func:`emit_report` wrote in JSON form; nulls become NaN."""
    try:
        d = json.loads(blob)
        return RunReport(
            config_digest=d["config_digest"],
            shift_results=tuple(_floats(s, X.ShiftResult) for s in d["shift_results"]),
            agreement=tuple(_floats(a, X.AgreementStats) for a in d["agreement"]),
            runs=tuple(d.get("runs", ())),
            metadata=d.get("metadata", {}),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"not a report: {exc}") from None


# ---------------------------------------------------------------------------
# CSV


def _cell(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return _num(v) if isinstance(v, float) else str(v)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def _scopes(r):
    seen = {a.scope for a in r.agreement}
    return ["pooled"] * ("pooled" in seen) + sorted(seen - {"pooled"})


def emit_report(r, format="json"):
    """JSON: bytes of the whole report. CSV: dict of file name -> bytes, one per table."""
    if format == "json":
        return (_dump(report_to_dict(r)) + "\n").encode("utf-8")
    if format != "csv":
        raise ValueError(f"format must be one of {FORMATS}")
    shift_fields = [f.name for f in fields(X.ShiftResult)]
    stat_fields = [f.name for f in fields(X.AgreementStats)]
    scopes = _scopes(r)
    cells = {(a.method, a.scope): a for a in r.agreement}
    mae_rows = []
    for m in r.methods():
        row = [m]
        for s in scopes:
            a = cells.get((m, s))
            row += [a.mae, a.mae_std] if a else [None, None]
        mae_rows.append(row)
    return {
        "shift_results.csv": _csv(shift_fields, ([getattr(s, k) for k in shift_fields] for s in r.shift_results)),
        "agreement_stats.csv": _csv(stat_fields, ([getattr(a, k) for k in stat_fields] for a in r.agreement)),
        "agreement_mae.csv": _csv(["method"] + [f"{s} {k}" for s in scopes for k in ("mae", "mae_std")], mae_rows),
    }


# ---------------------------------------------------------------------------
# SVG

WIDTH, HEIGHT = 800, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60
PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb")


def _condition_order(r, present):
    preferred = [X.IID] + r.methods() + [X.OOD]
    head = [c for c in preferred if c in present]
    return head + sorted(present - set(head))


def bar_chart_data(r, domain):
    """(conditions, classifiers, {(condition, classifier): (mean, std, n)}) for one domain."""
    rows = [s for s in r.shift_results if s.domain == domain]
    if not rows:
        raise DataError(f"unknown domain {domain!r}; report has {r.domains()}")
    groups = {}
    for s in rows:
        groups.setdefault((s.condition, r.classifier_of(s.model_id)), []).append(s.delta_vs_iid)
    conditions = _condition_order(r, {c for c, _ in groups})
    classifiers = sorted({k for _, k in groups})
    stats = {key: (float(np.mean(v)), float(np.std(v)), len(v)) for key, v in groups.items()}
    return conditions, classifiers, stats


def emit_bar_chart(r, domain):
    """Grouped bars of mean delta per condition with +/- std across seeds."""
    conditions, classifiers, stats = bar_chart_data(r, domain)
    metric = r.shift_results[0].metric
    extent = max(abs(m) + s for m, s, _ in stats.values())
    extent = 1.1 * extent if extent > 0 else 0.01
    plot_w, plot_h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def y(v):
        return TOP + plot_h * (extent - v) / (2 * extent)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">'
           f'{escape(domain)}: Δ{escape(metric)} vs IID</text>']
    for v in (-extent, 0.0, extent):
        out.append(f'<text x="{LEFT - 6}" y="{y(v) + 4:.2f}" text-anchor="end">{v:.3g}</text>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + plot_h}" stroke="black"/>')
    group_w = plot_w / len(conditions)
    bar_w = 0.8 * group_w / len(classifiers)
    for gi, cond in enumerate(conditions):
        x0 = LEFT + gi * group_w + 0.1 * group_w
        for ci, clf in enumerate(classifiers):
            if (cond, clf) not in stats:
                continue
            mean, std, n = stats[(cond, clf)]
            x = x0 + ci * bar_w
            top, bottom = sorted((y(mean), y(0.0)))
            out.append(
                f'<rect x="{x:.2f}" y="{top:.2f}" width="{bar_w:.2f}" height="{bottom - top:.2f}" '
                f'fill="{PALETTE[ci % len(PALETTE)]}" data-condition={quoteattr(cond)} '
                f'data-classifier={quoteattr(clf)} data-mean="{mean:.17g}" data-std="{std:.17g}" '
                f'data-n="{n}"/>')
            if std > 0:
                cx = x + bar_w / 2
                lo, hi = y(mean - std), y(mean + std)
                out.append(f'<line x1="{cx:.2f}" y1="{lo:.2f}" x2="{cx:.2f}" y2="{hi:.2f}" stroke="black"/>')
                for yy in (lo, hi):
                    out.append(f'<line x1="{cx - bar_w / 4:.2f}" y1="{yy:.2f}" x2="{cx + bar_w / 4:.2f}" '
                               f'y2="{yy:.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT + (gi + 0.5) * group_w:.2f}" y="{TOP + plot_h + 18}" '
                   f'text-anchor="middle">{escape(cond)}</text>')
    out.append(f'<line x1="{LEFT}" y1="{y(0.0):.2f}" x2="{LEFT + plot_w}" y2="{y(0.0):.2f}" '
               f'stroke="black" class="baseline"/>')
    for ci, clf in enumerate(classifiers):
        lx = LEFT + ci * 140
        ly = HEIGHT - 16
        out.append(f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" fill="{PALETTE[ci % len(PALETTE)]}"/>')
        out.append(f'<text x="{lx + 18}" y="{ly}">{escape(clf)}</text>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")
