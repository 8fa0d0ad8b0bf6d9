"""ATSS-style positive assignment on a single feature level."""
from dataclasses import dataclass

import numpy as np

from ..volcore import iou_matrix


@dataclass(frozen=True)
class Grid:
    gx: int
    gy: int
    stride: int

    @classmethod
    def for_image(cls, nx, ny, stride):
        return cls(-(-nx // stride), -(-ny // stride), stride)

    def centers(self):
        """(gx*gy, 2) pixel centers in flat (i-major) order."""
        i, j = np.meshgrid(np.arange(self.gx), np.arange(self.gy), indexing="ij")
        return np.stack([(i.ravel() + 0.5) * self.stride, (j.ravel() + 0.5) * self.stride], axis=1)

    def anchors(self, anchor_scale):
        c = self.centers()
        h = 0.5 * anchor_scale * self.stride
        return np.concatenate([c - h, c + h], axis=1)


@dataclass(frozen=True, eq=False)
class DenseTargets:
    q: np.ndarray         # (gx, gy) IoU-valued classification target, 0 on negatives
    box: np.ndarray       # (gx, gy, 4) (l, t, r, b) in stride units, 0 on negatives
    positive: np.ndarray  # (gx, gy) bool
    gt_index: np.ndarray  # (gx, gy) int, -1 on negatives

    @property
    def num_pos(self):
        return int(self.positive.sum())


def atss_assign(gt_boxes, grid: Grid, anchor_scale=8.0, topk=9) -> DenseTargets:
    """Assign grid locations to ground-truth boxes.

    Per GT: the ``topk`` locations nearest to its center are candidates; a
    candidate is positive when its anchor IoU reaches mean + std of the
    candidates' IoUs and its center lies strictly inside the GT. A GT left
    without positives gets its nearest location. Locations claimed by several
    GTs keep the one with the highest IoU (lower index on ties).
    Distance ties are broken by flat location index.
    """
    n_loc = grid.gx * grid.gy
    q = np.zeros(n_loc)
    owner = np.full(n_loc, -1, dtype=np.int64)
    box = np.zeros((n_loc, 4))
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gts):
        centers = grid.centers()
        ious = iou_matrix(grid.anchors(anchor_scale), gts)  # (n_loc, n_gt)
        k = min(int(topk), n_loc)
        claims = np.zeros((n_loc, len(gts)), dtype=bool)
        for g, (x0, y0, x1, y1) in enumerate(gts):
            gc = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
            d2 = ((centers - gc) ** 2).sum(axis=1)
            cand = np.argsort(d2, kind="stable")[:k]
            # centered on the first candidate so that equal IoUs compare exactly
            ci = ious[cand, g] - ious[cand[0], g]
            thr = ci.mean() + ci.std()
            cx, cy = centers[cand, 0], centers[cand, 1]
            inside = (cx > x0) & (cx < x1) & (cy > y0) & (cy < y1)
            pos = cand[(ci >= thr) & inside]
            if len(pos) == 0:
                pos = cand[:1]
            claims[pos, g] = True
        masked = np.where(claims, ious, -1.0)
        best = np.argmax(masked, axis=1)  # first max -> lowest gt index on ties
        has = claims.any(axis=1)
        owner[has] = best[has]
        q[has] = ious[has, best[has]]
        c = centers[has]
        g = gts[best[has]]
        box[has] = np.stack([c[:, 0] - g[:, 0], c[:, 1] - g[:, 1], g[:, 2] - c[:, 0], g[:, 3] - c[:, 1]],
                            axis=1) / grid.stride
    shp = (grid.gx, grid.gy)
    return DenseTargets(q.reshape(shp), box.reshape(shp + (4,)), (owner >= 0).reshape(shp), owner.reshape(shp))
