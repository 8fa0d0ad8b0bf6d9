"""Weighted boxes fusion across checkpoints/runs, slice by slice."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DataError
from .volcore import Detection, iou, load_detections


@dataclass(frozen=True)
class WbfConfig:
    iou_thr: float = 0.55
    num_sources: Optional[int] = None  # T; defaults to the number of inputs
    score_floor: float = 0.0

    def __post_init__(self):
        if not 0 < self.iou_thr < 1:
            raise ConfigError(f"iou_thr must be in (0, 1), got {self.iou_thr}")
        if self.num_sources is not None and self.num_sources < 1:
            raise ConfigError("num_sources must be >= 1")


def _fused_box(members):
    w = np.array([d.score for d in members], dtype=np.float64)
    b = np.array([d.box for d in members], dtype=np.float64)
    if w.sum() <= 0:
        return tuple(float(v) for v in b.mean(axis=0))
    return tuple(float(v) for v in (w[:, None] * b).sum(axis=0) / w.sum())


def fuse_slice(dets: List[Detection], cfg: WbfConfig, num_sources=None, source_id="wbf") -> List[Detection]:
    """Greedy clustering in descending score order.

    A detection joins the first cluster (in creation order) whose current
    fused box overlaps it with IoU > ``iou_thr``. Fused box: score-weighted
    mean of member boxes; fused score: mean member score times min(N, T)/T.
    """
    if not dets:
        return []
    z = dets[0].slice
    if any(d.slice != z for d in dets):
        raise DataError("fuse_slice got detections from several slices", field="slice")
    t = num_sources or cfg.num_sources or 1
    clusters = []  # [members, fused_box]
    for d in sorted(dets, key=Detection.sort_key):
        for c in clusters:
            if iou(c[1], d.box) > cfg.iou_thr:
                c[0].append(d)
                c[1] = _fused_box(c[0])
                break
        else:
            clusters.append([[d], d.box])
    out = []
    for members, box in clusters:
        n = len(members)
        score = float(np.mean([m.score for m in members])) * min(n, t) / t
        score = min(max(score, 0.0), 1.0)
        if score >= cfg.score_floor:
            out.append(Detection(z, box, score, source_id))
    return sorted(out, key=Detection.sort_key)


def fuse_detections(per_source: List[List[Detection]], cfg: WbfConfig, source_id="wbf") -> List[Detection]:
    """Fuse detection lists from several sources of one study."""
    t = cfg.num_sources or len(per_source)
    by_slice = defaultdict(list)
    for dets in per_source:
        for d in dets:
            by_slice[d.slice].append(d)
    out = []
    for z in sorted(by_slice):
        out.extend(fuse_slice(by_slice[z], cfg, t, source_id))
    return sorted(out, key=Detection.sort_key)


def fuse_study(paths, cfg: WbfConfig):
    """Fuse detection files of one study. Returns ``(study_id, detections, source_ids)``."""
    loaded = [load_detections(p) for p in paths]
    if not loaded:
        raise DataError("no detection files to fuse", field="detections")
    study_ids = {sid for sid, _, _, _ in loaded}
    if len(study_ids) != 1:
        raise DataError(f"detection files reference different studies: {sorted(study_ids)}", field="study_id")
    sources = sorted(src for _, src, _, _ in loaded)
    fused = fuse_detections([dets for _, _, dets, _ in loaded], cfg)
    return study_ids.pop(), fused, sources
