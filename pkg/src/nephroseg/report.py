"""Assemble the evaluation report and its CSV / SVG renderings."""

from __future__ import annotations

import csv
import io
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import DegenerateError, EmptyMatrixError, SampleSizeError
from .metrics import (
    DetectionMatrix,
    StudyMetrics,
    bland_altman,
    describe,
    detection_stats,
    lesion_detection,
    paired_t_test,
    study_summary,
)
from .volume import LabelMap

REPORT_VERSION = 1

CSV_COLUMNS = (
    "study_id", "has_lesion",
    "dsc_kidney", "dsc_lesion", "dsc_total", "ji_kidney", "ji_lesion", "ji_total",
    "vol_truth_kidney", "vol_pred_kidney", "vol_truth_lesion", "vol_pred_lesion",
    "pct_err_kidney", "pct_err_lesion", "pct_err_total",
    "tp", "fn", "fp", "tn",
)
OVERLAP_FIELDS = ("dsc_kidney", "ji_kidney", "dsc_lesion", "ji_lesion", "dsc_total", "ji_total")
BA_PANELS = (
    ("kidney_volume", "kidney", "absolute"),
    ("lesion_volume", "lesion", "absolute"),
    ("kidney_percent", "kidney", "percent"),
    ("lesion_percent", "lesion", "percent"),
)


def _overlap_table(studies: Sequence[StudyMetrics]) -> dict:
    groups = {
        "without_lesions": [s for s in studies if not s.has_lesion],
        "with_lesions": [s for s in studies if s.has_lesion],
        "all": list(studies),
    }
    return {
        group: {name: describe(getattr(s, name) for s in members) for name in OVERLAP_FIELDS}
        for group, members in groups.items()
    }


def _volume_table(studies: Sequence[StudyMetrics]) -> dict:
    out = {}
    for cls in ("kidney", "lesion", "total"):
        out[cls] = {
            "truth_ml": describe(getattr(s, f"vol_truth_{cls}") for s in studies),
            "pred_ml": describe(getattr(s, f"vol_pred_{cls}") for s in studies),
            # per-case percent errors, averaged; not the error of the mean volumes
            "pct_error": describe(getattr(s, f"pct_err_{cls}") for s in studies),
        }
    return out


def _agreement(studies: Sequence[StudyMetrics]) -> dict:
    out = {}
    for key, cls, mode in BA_PANELS:
        pairs = [(getattr(s, f"vol_truth_{cls}"), getattr(s, f"vol_pred_{cls}")) for s in studies]
        entry: dict = {}
        try:
            entry["bland_altman"] = bland_altman(pairs, mode).to_json()
        except SampleSizeError as exc:
            entry["bland_altman"] = None
            entry["note"] = str(exc)
        if mode == "absolute":
            try:
                entry["t_test"] = paired_t_test(pairs)
            except (SampleSizeError, DegenerateError) as exc:
                entry["t_test"] = None
                entry["t_test_note"] = str(exc)
        out[key] = entry
    return out


def _annotation_table(annotations: dict) -> dict:
    counts = {"right": 0, "left": 0, "endophytic": 0, "exophytic": 0}
    for items in annotations.values():
        for ann in items:
            counts[ann.side] += 1
            counts[ann.morphology] += 1
    total = counts["right"] + counts["left"]
    pct = {k: (100.0 * v / total if total else None) for k, v in counts.items()}
    return {"counts": counts, "percent": pct, "total": total}


def build_report(pairs: Sequence[tuple[str, LabelMap, LabelMap]], connectivity: int = 26,
                 min_component_voxels: int = 1, annotations: dict | None = None) -> dict:
    """Evaluation report for ``(study_id, truth, prediction)`` triples.

    Studies are processed in sorted id order so the aggregates never depend
    on the order files were discovered in.
    """
    pairs = sorted(pairs, key=lambda item: item[0])
    studies, matrices = [], []
    for study_id, truth, pred in pairs:
        studies.append(study_summary(truth, pred, truth.spacing, study_id))
        matrices.append(lesion_detection(truth, pred, connectivity, min_component_voxels))
    total = DetectionMatrix()
    for m in matrices:
        total = total + m
    try:
        stats = detection_stats(total)
    except EmptyMatrixError:
        stats = None
    records = []
    for s, m in zip(studies, matrices):
        row = s.to_json()
        row["detection"] = m.to_json()
        records.append(row)
    report = {
        "report_version": REPORT_VERSION,
        "n_studies": len(studies),
        "settings": {"connectivity": connectivity, "min_component_voxels": min_component_voxels},
        "studies": records,
        "overlap": _overlap_table(studies),
        "volumes": _volume_table(studies),
        "detection": {"matrix": total.to_json(), "stats": stats},
        "agreement": _agreement(studies),
    }
    if annotations:
        report["annotations"] = _annotation_table(
            {k: v for k, v in annotations.items() if k in {p[0] for p in pairs}})
    return report


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report["studies"]:
        flat = dict(row, **row["detection"])
        writer.writerow([_fmt(flat.get(col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def bland_altman_csv(summary: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("mean", "difference"))
    for point in summary["points"]:
        writer.writerow((repr(point["mean"]), repr(point["difference"])))
    return buf.getvalue()


# -- SVG ---------------------------------------------------------------------

_W, _H, _PAD = 480, 360, 56


def _scale(lo, hi, a, b):
    if hi - lo <= 0:
        lo, hi = lo - 1.0, hi + 1.0
    return lambda v: a + (v - lo) * (b - a) / (hi - lo)


def _svg(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">')
    return "\n".join([
        '<?xml version="1.0" encoding="UTF-8"?>', head,
        f"<title>{escape(title)}</title>",
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{_PAD}" y="{_PAD / 2}" width="{_W - 1.5 * _PAD}" height="{_H - 1.5 * _PAD}" '
        'fill="none" stroke="#444"/>',
        *body, "</svg>", "",
    ])


def bland_altman_svg(summary: dict, title: str, unit: str) -> str:
    """Scatter of (mean, difference) with bias and limit lines.

    The exact bias and limits are embedded as ``data-value`` attributes.
    """
    pts = [(p["mean"], p["difference"]) for p in summary["points"]]
    xs = [m for m, _ in pts]
    ys = [d for _, d in pts] + [summary["lower_limit"], summary["upper_limit"]]
    span_y = (max(ys) - min(ys)) or 1.0
    fx = _scale(min(xs), max(xs), _PAD + 10, _W - _PAD / 2 - 10)
    fy = _scale(min(ys) - 0.1 * span_y, max(ys) + 0.1 * span_y, _H - _PAD, _PAD / 2)
    body = []
    for m, d in pts:
        body.append(f'<circle cx="{fx(m):.2f}" cy="{fy(d):.2f}" r="3" fill="#1f77b4"/>')
    for key, label, colour in (("bias", "bias", "#d62728"), ("upper_limit", "+2 SD", "#555"),
                               ("lower_limit", "-2 SD", "#555")):
        value = summary[key]
        y = fy(value)
        dash = "" if key == "bias" else ' stroke-dasharray="5,4"'
        body.append(f'<line class="{key}" data-value="{value!r}" x1="{_PAD}" y1="{y:.2f}" '
                    f'x2="{_W - _PAD / 2}" y2="{y:.2f}" stroke="{colour}"{dash}/>')
        body.append(f'<text class="{key}-label" x="{_W - _PAD / 2 - 4}" y="{y - 4:.2f}" '
                    f'text-anchor="end">{label} = {value:.2f} {escape(unit)}</text>')
    body.append(f'<text x="{_W / 2}" y="{_H - 14}" text-anchor="middle">mean of truth and prediction (ml)</text>')
    body.append(f'<text x="14" y="{_H / 2}" transform="rotate(-90 14 {_H / 2})" '
                f'text-anchor="middle">difference, truth - prediction ({escape(unit)})</text>')
    return _svg(body, title)


def boxplot_svg(groups: dict[str, list[float]], title: str) -> str:
    """Box-and-whisker plot over [0, 1] for each named group of scores."""
    names = list(groups)
    fy = _scale(0.0, 1.0, _H - _PAD, _PAD / 2 + 6)
    width = (_W - 1.5 * _PAD) / max(len(names), 1)
    body = []
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        body.append(f'<text x="{_PAD - 6}" y="{fy(tick) + 4:.2f}" text-anchor="end">{tick:.2f}</text>')
    for i, name in enumerate(names):
        values = sorted(v for v in groups[name] if v is not None)
        cx = _PAD + width * (i + 0.5)
        body.append(f'<text x="{cx:.2f}" y="{_H - _PAD + 16}" text-anchor="middle">'
                    f'{escape(name)} (N={len(values)})</text>')
        if not values:
            continue
        q1, med, q3 = (float(np.percentile(values, q)) for q in (25, 50, 75))
        iqr = q3 - q1
        lo = min(v for v in values if v >= q1 - 1.5 * iqr)
        hi = max(v for v in values if v <= q3 + 1.5 * iqr)
        half = width * 0.2
        body.append(f'<line x1="{cx:.2f}" y1="{fy(lo):.2f}" x2="{cx:.2f}" y2="{fy(hi):.2f}" stroke="#333"/>')
        body.append(f'<rect class="box" data-median="{med!r}" x="{cx - half:.2f}" y="{fy(q3):.2f}" '
                    f'width="{2 * half:.2f}" height="{max(fy(q1) - fy(q3), 0.5):.2f}" '
                    'fill="#aec7e8" stroke="#333"/>')
        body.append(f'<line x1="{cx - half:.2f}" y1="{fy(med):.2f}" x2="{cx + half:.2f}" '
                    f'y2="{fy(med):.2f}" stroke="#d62728" stroke-width="2"/>')
        for v in values:
            if v < lo or v > hi:
                body.append(f'<circle cx="{cx:.2f}" cy="{fy(v):.2f}" r="2.5" fill="none" stroke="#333"/>')
    return _svg(body, title)


def report_svgs(report: dict) -> dict[str, str]:
    """File name -> SVG text for the overlap boxplots and the agreement plots."""
    studies = report["studies"]
    out = {}
    for metric, label in (("dsc", "Dice similarity coefficient"), ("ji", "Jaccard index")):
        groups = {
            "kidney": [s[f"{metric}_kidney"] for s in studies],
            "lesion": [s[f"{metric}_lesion"] for s in studies],
            "total": [s[f"{metric}_total"] for s in studies],
        }
        out[f"boxplot_{metric}.svg"] = boxplot_svg(groups, label)
    for key, cls, mode in BA_PANELS:
        summary = report["agreement"][key]["bland_altman"]
        if summary is None:
            continue
        unit = "ml" if mode == "absolute" else "%"
        title = f"Bland-Altman: {cls} {'volume' if mode == 'absolute' else 'percent error'}"
        out[f"bland_altman_{key}.svg"] = bland_altman_svg(summary, title, unit)
    return out

