"""Detection matching, FROC, average precision and fold aggregation.

Matching is per slice in 2D at a fixed IoU threshold (0.25 by default).
Sensitivity at a given FP/vol is read off the FROC curve by linear
interpolation between operating points and clamped outside the swept range.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, DataError
from .volcore import Detection, iou

FP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0, 6.0, 8.0)
EVAL_IOU = 0.25


def sens_label(f):
    return f"S@{f:g}"


def table_header(thresholds=FP_THRESHOLDS):
    return ",".join(["mAP"] + [sens_label(f) for f in thresholds])


@dataclass
class MatchResult:
    detections: list  # sorted by Detection.sort_key
    tp: np.ndarray
    matched_gt: np.ndarray
    gt_hit: np.ndarray

    @property
    def n_gt(self):
        return len(self.gt_hit)

    @property
    def scores(self):
        return np.array([d.score for d in self.detections], dtype=np.float64)


@dataclass
class MetricReport:
    map: Optional[float]
    froc_points: list
    sens_at_fp: list
    thresholds: tuple = FP_THRESHOLDS
    per_fold: list = field(default_factory=list)
    n_volumes: int = 0
    n_gt: int = 0

    def sens(self, f):
        return self.sens_at_fp[list(self.thresholds).index(f)]

    def row(self):
        return [self.map] + list(self.sens_at_fp)

    def to_json(self):
        return {"map": self.map, "froc_points": [list(p) for p in self.froc_points],
                "sens_at_fp": {sens_label(f): s for f, s in zip(self.thresholds, self.sens_at_fp)},
                "thresholds": list(self.thresholds), "n_volumes": self.n_volumes, "n_gt": self.n_gt,
                "per_fold": [r.to_json() for r in self.per_fold]}


def _gt_boxes(gts):
    out = []
    for g in gts:
        if hasattr(g, "box"):
            out.append((int(g.slice), tuple(g.box)))
        else:
            z, box = g
            out.append((int(z), tuple(box)))
    return out


def match_detections(dets, gts, iou_thr=EVAL_IOU) -> MatchResult:
    """Greedy matching in descending score order.

    A detection is a TP when an unmatched GT on the same slice has IoU >=
    ``iou_thr``; it takes the highest-IoU such GT (lowest index on ties).
    ``gts`` holds BoxAnnotations or ``(slice, box)`` pairs.
    """
    dets = sorted(dets, key=Detection.sort_key)
    gt = _gt_boxes(gts)
    by_slice = {}
    for gi, (z, _) in enumerate(gt):
        by_slice.setdefault(z, []).append(gi)
    hit = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.full(len(dets), -1, dtype=np.int64)
    for di, d in enumerate(dets):
        best, best_iou = -1, -1.0
        for gi in by_slice.get(d.slice, ()):
            if hit[gi]:
                continue
            v = iou(d.box, gt[gi][1])
            if v >= iou_thr and v > best_iou:
                best, best_iou = gi, v
        if best >= 0:
            hit[best] = True
            tp[di] = True
            matched[di] = best
    return MatchResult(dets, tp, matched, hit)


def _sweep(matches: List[MatchResult]):
    """Cumulative (tp, fp) after each distinct score cutoff, highest first."""
    scores = np.concatenate([m.scores for m in matches]) if matches else np.zeros(0)
    tps = np.concatenate([m.tp for m in matches]) if matches else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(~tps)
    if len(scores) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    last = np.r_[scores[1:] != scores[:-1], True]  # last index of each tie group
    return scores[last], ctp[last], cfp[last]


def _n_gt(matches):
    n = sum(m.n_gt for m in matches)
    if n == 0:
        raise DataError("sensitivity is undefined without ground truth", field="gt")
    return n


def froc(matches: List[MatchResult], thresholds=FP_THRESHOLDS, n_volumes=None):
    """Operating points ``[(fp_per_volume, sensitivity)]`` (starting at (0, 0),
    one per distinct score cutoff) and the sensitivity at each FP/vol threshold."""
    n_vol = len(matches) if n_volumes is None else int(n_volumes)
    if n_vol < 1:
        raise DataError("FROC needs at least one volume", field="volumes")
    n_gt = _n_gt(matches)
    _, ctp, cfp = _sweep(matches)
    fps = np.r_[0.0, cfp / n_vol]
    sens = np.r_[0.0, ctp / n_gt]
    points = [(float(f), float(s)) for f, s in zip(fps, sens)]
    uf = np.unique(fps)
    best = np.array([sens[fps == f].max() for f in uf])
    at = [float(np.interp(f, uf, best)) for f in thresholds]
    return points, at


def average_precision(matches: List[MatchResult]) -> float:
    """All-point interpolated area under the precision-recall curve."""
    n_gt = _n_gt(matches)
    _, ctp, cfp = _sweep(matches)
    if len(ctp) == 0:
        return 0.0
    recall = np.r_[0.0, ctp / n_gt]
    precision = np.r_[0.0, ctp / (ctp + cfp)]
    env = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * env[1:]))


def evaluate(matches: List[MatchResult], thresholds=FP_THRESHOLDS, n_volumes=None) -> MetricReport:
    points, at = froc(matches, thresholds, n_volumes)
    return MetricReport(average_precision(matches), points, at, tuple(thresholds),
                        n_volumes=len(matches) if n_volumes is None else int(n_volumes),
                        n_gt=sum(m.n_gt for m in matches))


def aggregate_folds(reports: List[MetricReport]) -> MetricReport:
    if not reports:
        raise DataError("need at least one fold report", field="reports")
    th = tuple(reports[0].thresholds)
    if any(tuple(r.thresholds) != th for r in reports):
        raise ConfigError("fold reports use different FP/vol thresholds")
    maps = [r.map for r in reports]
    mean_map = None if any(m is None for m in maps) else float(np.mean(maps))
    sens = [float(np.mean([r.sens_at_fp[i] for r in reports])) for i in range(len(th))]
    return MetricReport(mean_map, [], sens, th, per_fold=list(reports),
                        n_volumes=sum(r.n_volumes for r in reports), n_gt=sum(r.n_gt for r in reports))


def make_folds(study_ids, k=5):
    """Partition study ids into ``k`` folds by a stable hash of the id."""
    folds = [[] for _ in range(k)]
    for sid in sorted(study_ids):
        h = int(hashlib.sha256(sid.encode()).hexdigest(), 16)
        folds[h % k].append(sid)
    return folds


# ---------------------------------------------------------------- rendering


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def report_csv(rows, thresholds=FP_THRESHOLDS, provenance=None):
    lines = [table_header(thresholds)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    if provenance:
        lines.append(f"# config_sha256={provenance}")
    return "\n".join(lines) + "\n"


_W, _H, _M = 480, 360, 50


def _curve_points(r: MetricReport):
    if r.froc_points:
        return r.froc_points
    return list(zip(r.thresholds, r.sens_at_fp))


def froc_svg(reports, labels=None, provenance=None, title="FROC"):
    """FROC curves (one polyline per report) with markers at the FP/vol thresholds."""
    labels = labels or [f"report {i}" for i in range(len(reports))]
    xmax = max([max(r.thresholds) for r in reports] + [1.0])
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]

    def sx(f):
        return _M + (_W - 2 * _M) * min(f, xmax) / xmax

    def sy(s):
        return _H - _M - (_H - 2 * _M) * s

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">']
    if provenance:
        out.append(f"<!-- config_sha256={escape(provenance)} -->")
    out.append(f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<line x1="{_M}" y1="{_H - _M}" x2="{_W - _M}" y2="{_H - _M}" stroke="black"/>')
    out.append(f'<line x1="{_M}" y1="{_M}" x2="{_M}" y2="{_H - _M}" stroke="black"/>')
    for f in reports[0].thresholds:
        out.append(f'<text x="{sx(f):.1f}" y="{_H - _M + 16}" text-anchor="middle" font-size="10">{f:g}</text>')
    for s in (0.0, 0.5, 1.0):
        out.append(f'<text x="{_M - 6}" y="{sy(s) + 3:.1f}" text-anchor="end" font-size="10">{s:g}</text>')
    out.append(f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle" font-size="11">FP per volume</text>')
    for i, (r, lab) in enumerate(zip(reports, labels)):
        col = colors[i % len(colors)]
        pts = " ".join(f"{sx(f):.2f},{sy(s):.2f}" for f, s in _curve_points(r) if f <= xmax)
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}">'
                   f'<title>{escape(lab)}</title></polyline>')
        for f, s in zip(r.thresholds, r.sens_at_fp):
            out.append(f'<circle cx="{sx(f):.2f}" cy="{sy(s):.2f}" r="3" fill="{col}"/>')
        out.append(f'<text x="{_W - _M}" y="{_M + 14 * i:.1f}" text-anchor="end" font-size="10" '
                   f'fill="{col}">{escape(lab)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_report(r: MetricReport, fmt, path, provenance=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        text = report_csv([r.row()], r.thresholds, provenance)
    elif fmt == "svg":
        text = froc_svg([r], ["FROC"], provenance)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path
