"""Multi-horizon error metrics, worst-case analyses and report files.

Errors are ``prediction - actual`` (negative means under-prediction) and are
pooled over segments at each horizon step; step ``i`` is minute ``5 i``.
IQR uses linear interpolation between closest ranks (numpy's default
``linear`` percentile method).
"""

import json
import os
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .segments import SLOT

SUMMARY_MINUTES = (30, 60, 120, 240)
TABLE_FIELDS = ("rmse", "mae", "me", "iqr", "min_err", "max_err")


@dataclass
class HorizonMetrics:
    rmse: np.ndarray  # (H,)
    mae: np.ndarray
    me: np.ndarray
    iqr: np.ndarray
    min_err: np.ndarray
    max_err: np.ndarray
    n_segments: int

    @property
    def minutes(self):
        return SLOT * np.arange(1, self.rmse.size + 1)

    def at(self, minute):
        """Metrics at a lead time in minutes, as a dict."""
        i = int(round(minute / SLOT)) - 1
        return {f: float(getattr(self, f)[i]) for f in TABLE_FIELDS}


def forecast_errors(predictions, actuals):
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if p.shape != a.shape or p.ndim != 2:
        raise ValueError(f"predictions {p.shape} and actuals {a.shape} must be equal (N, H) arrays")
    if p.shape[0] == 0:
        raise ValueError("no segments to evaluate")
    return p - a


def compute_metrics(predictions, actuals):
    e = forecast_errors(predictions, actuals)
    q1, q3 = np.percentile(e, [25.0, 75.0], axis=0)
    return HorizonMetrics(
        rmse=np.sqrt(np.mean(e * e, axis=0)),
        mae=np.mean(np.abs(e), axis=0),
        me=np.mean(e, axis=0),
        iqr=q3 - q1,
        min_err=e.min(axis=0),
        max_err=e.max(axis=0),
        n_segments=e.shape[0],
    )


def segment_rmse(predictions, actuals):
    e = forecast_errors(predictions, actuals)
    return np.sqrt(np.mean(e * e, axis=1))


def shared_test_intersection(evaluable):
    """Segment ids evaluable by every model, sorted."""
    sets = [set(v) for v in evaluable.values()]
    if not sets:
        raise ValueError("no models given")
    shared = set.intersection(*sets)
    if not shared:
        sizes = ", ".join(f"{k}: {len(v)}" for k, v in evaluable.items())
        raise ValueError(f"models share no evaluable segment ({sizes}); check upstream failures")
    return sorted(shared)


@dataclass
class WorstCaseReport:
    mode: str
    k: int
    aggregates: dict  # model -> {"rmse", "mae", "me"}
    selected: dict  # model -> list of segment ids


def _aggregate(e):
    return {"rmse": float(np.sqrt(np.mean(e * e))), "mae": float(np.mean(np.abs(e))),
            "me": float(np.mean(e))}


def worst_case(errors_by_model, ids, mode="independent", k=100):
    """Aggregate errors on the ``k`` segments with the highest RMSE.

    ``errors_by_model`` maps a model name to an ``(N, H)`` error array whose
    rows follow ``ids``. ``independent`` ranks segments per model; ``shared``
    ranks by the cross-model mean of per-segment RMSE and evaluates every model
    on that one set. Ties keep the earlier id.
    """
    if mode not in ("independent", "shared"):
        raise ValueError(f"unknown worst-case mode {mode!r}")
    ids = list(ids)
    errors = {m: np.asarray(e, dtype=float) for m, e in errors_by_model.items()}
    for m, e in errors.items():
        if e.shape[0] != len(ids):
            raise ValueError(f"{m}: {e.shape[0]} error rows for {len(ids)} ids")
    k = min(k, len(ids))
    per_seg = {m: np.sqrt(np.mean(e * e, axis=1)) for m, e in errors.items()}
    aggregates, selected = {}, {}
    if mode == "shared":
        mean_rmse = np.mean(np.stack(list(per_seg.values())), axis=0)
        order = np.argsort(-mean_rmse, kind="stable")[:k]
    for m, e in errors.items():
        if mode == "independent":
            order = np.argsort(-per_seg[m], kind="stable")[:k]
        aggregates[m] = _aggregate(e[order])
        selected[m] = [ids[i] for i in order]
    return WorstCaseReport(mode, k, aggregates, selected)


# ------------------------------------------------------------------ output

def _fmt(v):
    return format(float(v), ".10g")


def write_metrics_table(path, metrics_by_model):
    with open(path, "w") as fh:
        fh.write("model\tstep\tminutes\tn_segments\t" + "\t".join(TABLE_FIELDS) + "\n")
        for model, m in metrics_by_model.items():
            for i in range(m.rmse.size):
                row = [model, str(i + 1), str(int(m.minutes[i])), str(m.n_segments)]
                row += [_fmt(getattr(m, f)[i]) for f in TABLE_FIELDS]
                fh.write("\t".join(row) + "\n")


def read_metrics_table(path):
    rows = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            rec = dict(zip(header, line.rstrip("\n").split("\t")))
            rows.setdefault(rec["model"], []).append(rec)
    out = {}
    for model, recs in rows.items():
        recs.sort(key=lambda r: int(r["step"]))
        arrays = {f: np.array([float(r[f]) for r in recs]) for f in TABLE_FIELDS}
        out[model] = HorizonMetrics(n_segments=int(recs[0]["n_segments"]), **arrays)
    return out


def summary_text(metrics_by_model, minutes=SUMMARY_MINUTES):
    lines = []
    for field in ("rmse", "mae", "me"):
        lines.append(f"{field.upper()} (mg/dL)")
        lines.append("model".ljust(22) + "".join(f"{m:>10d}" for m in minutes))
        for model, met in metrics_by_model.items():
            vals = [met.at(m)[field] for m in minutes]
            lines.append(model.ljust(22) + "".join(f"{v:10.2f}" for v in vals))
        lines.append("")
    return "\n".join(lines)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def line_chart_svg(series, title, ylabel, width=640, height=400):
    """Deterministic SVG line chart of ``{name: (x, y)}``."""
    left, right, top, bottom = 60, 170, 30, 45
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(min(ys.min(), 0.0)), float(max(ys.max(), 0.0))
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0 if x1 > x0 else 1.0) * pw

    def py(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left}" y="18" font-family="sans-serif" font-size="14">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in np.linspace(y0, y1, 6):
        out.append(f'<line x1="{left}" y1="{py(t):.2f}" x2="{left + pw}" y2="{py(t):.2f}" '
                   f'stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.2f}" font-family="sans-serif" '
                   f'font-size="10" text-anchor="end">{t:.1f}</text>')
    if y0 < 0 < y1:
        out.append(f'<line x1="{left}" y1="{py(0):.2f}" x2="{left + pw}" y2="{py(0):.2f}" '
                   f'stroke="#888" stroke-dasharray="4 3"/>')
    for t in (30, 60, 120, 180, 240):
        if x0 <= t <= x1:
            out.append(f'<text x="{px(t):.2f}" y="{top + ph + 16}" font-family="sans-serif" '
                       f'font-size="10" text-anchor="middle">{t}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" font-family="sans-serif" '
               f'font-size="12" text-anchor="middle">horizon (min)</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.2f}" font-family="sans-serif" font-size="12" '
               f'text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.2f})">'
               f'{escape(ylabel)}</text>')
    for n, (name, (x, y)) in enumerate(series.items()):
        color = _PALETTE[n % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{pts}"/>')
        ly = top + 14 + 16 * n
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-family="sans-serif" '
                   f'font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(metrics_by_model, out_dir, worst=None, shared_count=None):
    """Write ``metrics.tsv``, ``summary.txt``, ``mae.svg``, ``me.svg`` and,
    when given, ``worst_case.jsonl``. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, k) for k in
             ("metrics.tsv", "summary.txt", "mae.svg", "me.svg")}
    write_metrics_table(paths["metrics.tsv"], metrics_by_model)
    text = summary_text(metrics_by_model)
    if shared_count is not None:
        text = f"shared test segments: {shared_count}\n\n" + text
    with open(paths["summary.txt"], "w") as fh:
        fh.write(text)
    for field, fname, label in (("mae", "mae.svg", "MAE (mg/dL)"), ("me", "me.svg", "ME (mg/dL)")):
        series = {m: (met.minutes, getattr(met, field)) for m, met in metrics_by_model.items()}
        with open(paths[fname], "w") as fh:
            fh.write(line_chart_svg(series, f"{label} by forecast horizon", label))
    if worst:
        paths["worst_case.jsonl"] = os.path.join(out_dir, "worst_case.jsonl")
        with open(paths["worst_case.jsonl"], "w") as fh:
            for rep in worst:
                for model, agg in rep.aggregates.items():
                    fh.write(json.dumps({"mode": rep.mode, "k": rep.k, "model": model,
                                         **{k: round(v, 10) for k, v in agg.items()},
                                         "segments": rep.selected[model]}, sort_keys=True) + "\n")
    return paths

