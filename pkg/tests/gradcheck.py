"""Central finite-difference checks shared by unit and acceptance tests.

Each ``*_case`` draws one random instance from ``rng`` and returns a list of
(analytic, numeric) pairs, or None when the instance sits too close to a
kink (min/max switch in GIoU, integer crossing in bilinear sampling) for
finite differences to be meaningful.
"""
import numpy as np

from lndet.detmini.assign import Grid, atss_assign
from lndet.detmini.losses import giou_loss, varifocal_loss, varifocal_loss_logits
from lndet.detmini.model import DetectorConfig, backward, forward, init_params, star_points, total_loss

RTOL = 1e-3
ATOL = 1e-8
KINK = 1e-4


def close(a, n, rtol=RTOL, atol=ATOL):
    return abs(a - n) <= max(rtol * max(abs(a), abs(n)), atol)


def vfl_case(rng, eps=1e-6):
    p = rng.uniform(0.02, 0.98)
    q = 0.0 if rng.random() < 0.4 else rng.uniform(0.05, 1.0)
    _, g = varifocal_loss(p, q)
    n = (varifocal_loss(p + eps, q)[0] - varifocal_loss(p - eps, q)[0]) / (2 * eps)
    z = rng.normal(0, 3)
    _, gz = varifocal_loss_logits(z, q)
    nz = (varifocal_loss_logits(z + eps, q)[0] - varifocal_loss_logits(z - eps, q)[0]) / (2 * eps)
    return [(float(g), float(n)), (float(gz), float(nz))]


def giou_case(rng, eps=1e-6):
    pred = rng.uniform(0.2, 4.0, size=4)
    target = rng.uniform(0.2, 4.0, size=4)
    if rng.random() < 0.3:  # disjoint along x: pred on the far right
        pred[0] = -target[2] - rng.uniform(0.5, 2.0)
        pred[2] = -pred[0] + rng.uniform(0.5, 2.0)
    if np.min(np.abs(pred - target)) < KINK:
        return None
    iw = min(pred[0], target[0]) + min(pred[2], target[2])
    ih = min(pred[1], target[1]) + min(pred[3], target[3])
    if min(abs(iw), abs(ih)) < KINK:
        return None
    w = rng.uniform(0.1, 1.0)
    _, g = giou_loss(pred, target, w)
    pairs = []
    for k in range(4):
        e = np.zeros(4)
        e[k] = eps
        n = (giou_loss(pred + e, target, w)[0] - giou_loss(pred - e, target, w)[0]) / (2 * eps)
        pairs.append((float(g[k]), float(n)))
    return pairs


def _near_integer(a):
    return np.min(np.abs(a - np.round(a))) < KINK


def network_case(rng, n_params=40, eps=1e-6, refine=True, size=16):
    cfg = DetectorConfig(anchor_scale=float(rng.choice([2.0, 3.0, 8.0])), refine_enabled=refine,
                         vfl_norm=str(rng.choice(["locations", "positives"])))
    mp = init_params(cfg, int(rng.integers(1 << 30)))
    mp.flat[:] += rng.normal(0, 0.05, mp.size)
    n = int(rng.integers(1, 3))
    x = rng.random((n, 3, size, size))
    grid = Grid.for_image(size, size, cfg.feature_stride)
    targets = []
    for _ in range(n):
        boxes = []
        for _ in range(int(rng.integers(0, 3))):
            x0, y0 = rng.uniform(0, size - 6, size=2)
            boxes.append((x0, y0, x0 + rng.uniform(3, 6), y0 + rng.uniform(3, 6)))
        targets.append(atss_assign(boxes, grid, cfg.anchor_scale, cfg.atss_topk))
    out = forward(mp, x, cfg)
    if refine:
        px, py = star_points(out["dist"], *out["grid"])
        if _near_integer(px) or _near_integer(py):
            return None
    for key in ("dist", "refined") if refine else ("dist",):
        for t, pred in zip(targets, out[key]):
            if t.num_pos and np.min(np.abs(pred[t.positive] - t.box[t.positive])) < KINK:
                return None
    backward(mp, x, targets, cfg)
    an = mp.grad.copy()
    pairs = []
    for i in rng.choice(mp.size, n_params, replace=False):
        o = mp.flat[i]
        mp.flat[i] = o + eps
        lp = total_loss(mp, x, targets, cfg)
        mp.flat[i] = o - eps
        lm = total_loss(mp, x, targets, cfg)
        mp.flat[i] = o
        pairs.append((float(an[i]), (lp - lm) / (2 * eps)))
    return pairs


def run_cases(kind, count, seed):
    """Run ``count`` non-degenerate cases; returns (n_cases, n_failed_cases, worst pair)."""
    fn = {"vfl": vfl_case, "giou": giou_case, "network": network_case}[kind]
    rng = np.random.default_rng(seed)
    done = failed = 0
    worst = None
    while done < count:
        pairs = fn(rng)
        if pairs is None:
            continue
        done += 1
        bad = [pr for pr in pairs if not close(*pr)]
        if bad:
            failed += 1
            worst = bad[0]
    return done, failed, worst
