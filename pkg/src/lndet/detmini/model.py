"""Tiny one-stage anchor-free detector with manual backpropagation.

Backbone: three 3x3 convolutions (stride 2, 2, 1) with SiLU, giving one
feature level at stride 4. Heads on that level:

* score: 1x1 conv -> logistic, trained towards the IoU-aware target q
* box:   1x1 conv -> exp, distances (l, t, r, b) in stride units
* star refinement: features are bilinearly sampled at nine points of the
  initial box (center, side midpoints, corners), concatenated and mapped
  linearly to per-side factors ``2**tanh(d)`` in [0.5, 2] that rescale the
  initial distances.

All math is float64; checkpoints store float32.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import kernels
from ..errors import ConfigError, NumericalFault
from .assign import DenseTargets
from .losses import giou_loss, varifocal_loss_logits

STRIDE = 4
N_STAR = 9
LN2 = math.log(2.0)
IACS_TARGETS = ("anchor", "anchor_norm", "predicted")

# star points as linear combinations of (l, r) along x and (t, b) along y
STAR_X = np.array([[-0.5, 0.5], [-1.0, 0.0], [0.0, 1.0], [-0.5, 0.5], [-0.5, 0.5],
                   [-1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 1.0]])
STAR_Y = np.array([[-0.5, 0.5], [-0.5, 0.5], [-0.5, 0.5], [-1.0, 0.0], [0.0, 1.0],
                   [-1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])


@dataclass(frozen=True)
class DetectorConfig:
    feature_stride: int = STRIDE
    channels: tuple = (16, 32, 32)
    anchor_scale: float = 8.0
    atss_topk: int = 9
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0
    refine_enabled: bool = True
    score_threshold: float = 0.05
    max_per_slice: int = 100
    nms_free: bool = True
    cls_prior: float = 0.01
    # "locations": mean over all grid locations; "positives": sum / max(1, #positives)
    vfl_norm: str = "locations"
    # score target for positives: "anchor" (assigner q), "anchor_norm" (q divided by
    # the best q of the same GT) or "predicted" (IoU of the detached final box with its GT)
    iacs_target: str = "anchor"

    def __post_init__(self):
        if self.feature_stride != STRIDE:
            raise ConfigError(f"the backbone has a fixed stride of {STRIDE}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError("channels must be three positive widths")
        if self.atss_topk < 1:
            raise ConfigError("atss_topk must be >= 1")
        if not 0 < self.vfl_alpha <= 1:
            raise ConfigError("vfl_alpha must be in (0, 1]")
        if self.vfl_gamma < 0:
            raise ConfigError("vfl_gamma must be >= 0")
        if self.anchor_scale <= 0:
            raise ConfigError("anchor_scale must be > 0")
        if not 0 <= self.score_threshold < 1:
            raise ConfigError("score_threshold must be in [0, 1)")
        if self.vfl_norm not in ("locations", "positives"):
            raise ConfigError(f"vfl_norm must be 'locations' or 'positives', got {self.vfl_norm!r}")
        if self.iacs_target not in IACS_TARGETS:
            raise ConfigError(f"iacs_target must be one of {IACS_TARGETS}, got {self.iacs_target!r}")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def param_specs(cfg: DetectorConfig):
    c1, c2, c3 = cfg.channels
    return [
        ("conv1.w", (c1, 3, 3, 3)), ("conv1.b", (c1,)),
        ("conv2.w", (c2, c1, 3, 3)), ("conv2.b", (c2,)),
        ("conv3.w", (c3, c2, 3, 3)), ("conv3.b", (c3,)),
        ("cls.w", (1, c3)), ("cls.b", (1,)),
        ("reg.w", (4, c3)), ("reg.b", (4,)),
        ("star.w", (4, N_STAR * c3)), ("star.b", (4,)),
    ]


class ModelParams:
    """Flat parameter vector with named views and a same-shaped gradient buffer."""

    def __init__(self, specs, flat=None):
        self.specs = [(n, tuple(s)) for n, s in specs]
        size = sum(int(np.prod(s)) for _, s in self.specs)
        self.flat = np.zeros(size) if flat is None else np.array(flat, dtype=np.float64)
        if self.flat.shape != (size,):
            raise ValueError(f"flat buffer has {self.flat.size} values, expected {size}")
        self.grad = np.zeros(size)
        self.p = self._views(self.flat)
        self.g = self._views(self.grad)

    def _views(self, buf):
        out, off = {}, 0
        for name, shape in self.specs:
            n = int(np.prod(shape))
            out[name] = buf[off:off + n].reshape(shape)
            off += n
        return out

    def __getitem__(self, name):
        return self.p[name]

    def copy(self):
        return ModelParams(self.specs, self.flat.copy())

    def zero_grad(self):
        self.grad[:] = 0.0

    @property
    def size(self):
        return self.flat.size


def zero_params(cfg: DetectorConfig) -> ModelParams:
    return ModelParams(param_specs(cfg))


def init_params(cfg: DetectorConfig, seed=0) -> ModelParams:
    """He-normal convs, small heads, score bias set to the foreground prior."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7])))
    mp = zero_params(cfg)
    for name, shape in mp.specs:
        if name.endswith(".w") and name.startswith("conv"):
            fan_in = int(np.prod(shape[1:]))
            mp.p[name][...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name in ("cls.w", "reg.w"):
            mp.p[name][...] = rng.normal(0.0, 0.01, size=shape)
    mp.p["cls.b"][...] = -math.log((1.0 - cfg.cls_prior) / cfg.cls_prior)
    return mp


# ---------------------------------------------------------------- layers


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _conv_fwd(x, w, b, stride):
    k = w.shape[-1]
    cols = kernels.im2col(x, k, stride, k // 2)
    n, oh, ow, kk = cols.shape
    out = cols.reshape(-1, kk) @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2), cols


def _conv_bwd(dout, cols, x_shape, w, stride):
    k = w.shape[-1]
    co = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, co)
    c2 = cols.reshape(-1, cols.shape[-1])
    dw = (d2.T @ c2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(co, -1)).reshape(cols.shape)
    return kernels.col2im(dcols, x_shape, k, stride, k // 2), dw, db


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericalFault(f"non-finite activation in {layer}", layer=layer)


def pad_to_stride(x, stride=STRIDE):
    """Zero-pad the two spatial axes of (N, C, H, W) up to a multiple of ``stride``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return x


def as_batch(x):
    """Accept a Sample25D, a list of them, or an array (C,H,W)/(N,C,H,W)."""
    from ..sampler import Sample25D

    if isinstance(x, Sample25D):
        x = x.channels[None]
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], Sample25D):
        x = np.stack([s.channels for s in x])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return x


def star_points(dist, gx, gy):
    """Sample positions (feature coordinates) of the nine star points.

    ``dist`` is (N, gx, gy, 4) in stride units; returns px, py of shape
    (N, gx*gy*9).
    """
    n = dist.shape[0]
    i = np.arange(gx, dtype=np.float64)[None, :, None, None]
    j = np.arange(gy, dtype=np.float64)[None, None, :, None]
    l, t, r, b = (dist[..., k:k + 1] for k in range(4))
    px = i + STAR_X[:, 0] * l + STAR_X[:, 1] * r
    py = j + STAR_Y[:, 0] * t + STAR_Y[:, 1] * b
    return px.reshape(n, -1), py.reshape(n, -1)


def forward(params: ModelParams, x, cfg: DetectorConfig, keep_cache=False):
    """Dense predictions for a batch.

    Returns a dict with ``score`` (N, gx, gy) in (0, 1), ``dist`` (N, gx, gy, 4)
    initial distances in stride units and, when refinement is enabled,
    ``refined``. With ``keep_cache`` the intermediates for :func:`backward`
    are included under ``cache``.
    """
    p = params.p
    x = pad_to_stride(as_batch(x))
    cache = {"x_shape": x.shape}
    h = x
    for li, stride in ((1, 2), (2, 2), (3, 1)):
        z, cols = _conv_fwd(h, p[f"conv{li}.w"], p[f"conv{li}.b"], stride)
        _check_finite(z, f"conv{li}")
        sig = _sigmoid(z)
        cache[f"in{li}"] = h.shape
        cache[f"cols{li}"], cache[f"z{li}"], cache[f"sig{li}"] = cols, z, sig
        h = z * sig
    feat = h
    n, c, gx, gy = feat.shape
    fr = feat.transpose(0, 2, 3, 1)  # (N, gx, gy, C)
    logit = fr @ p["cls.w"][0] + p["cls.b"][0]
    reg = fr @ p["reg.w"].T + p["reg.b"]
    _check_finite(logit, "cls")
    _check_finite(reg, "reg")
    dist = np.exp(reg)
    _check_finite(dist, "reg")
    out = {"score": _sigmoid(logit), "logit": logit, "dist": dist, "grid": (gx, gy)}
    cache.update(feat=feat, fr=fr)
    if cfg.refine_enabled:
        px, py = star_points(dist, gx, gy)
        samp = kernels.bilinear_gather(feat, px, py).reshape(n, gx, gy, N_STAR * c)
        d = samp @ p["star.w"].T + p["star.b"]
        th = np.tanh(d)
        m = np.exp2(th)
        refined = dist * m
        _check_finite(refined, "star")
        out["refined"] = refined
        cache.update(px=px, py=py, samp=samp, th=th, m=m)
    if keep_cache:
        out["cache"] = cache
    return out


def _stack_targets(targets):
    if isinstance(targets, DenseTargets):
        targets = [targets]
    q = np.stack([t.q for t in targets])
    box = np.stack([t.box for t in targets])
    pos = np.stack([t.positive for t in targets])
    return q, box, pos


def per_gt_normalized(t: DenseTargets):
    """q divided by the largest q among the positives of the same GT."""
    out = np.zeros_like(t.q)
    for gi in np.unique(t.gt_index[t.positive]):
        m = t.positive & (t.gt_index == gi)
        top = t.q[m].max()
        out[m] = t.q[m] / top if top > 0 else 1.0
    return out


def dist_iou(a, b):
    """IoU of two (l, t, r, b) distance boxes anchored at the same point."""
    ia = (np.minimum(a[..., 0], b[..., 0]) + np.minimum(a[..., 2], b[..., 2]))
    ib = (np.minimum(a[..., 1], b[..., 1]) + np.minimum(a[..., 3], b[..., 3]))
    inter = np.clip(ia, 0, None) * np.clip(ib, 0, None)
    area_a = (a[..., 0] + a[..., 2]) * (a[..., 1] + a[..., 3])
    area_b = (b[..., 0] + b[..., 2]) * (b[..., 1] + b[..., 3])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def loss_terms(out, targets, cfg: DetectorConfig):
    """Per-sample loss and gradients w.r.t. logits and distances.

    Per sample: mean varifocal loss over all locations plus, over positives,
    the q-weighted GIoU loss averaged by positive count, for the initial and
    (when enabled) the refined boxes. The returned total is the batch mean.
    """
    q, tbox, pos = _stack_targets(targets)
    n = q.shape[0]
    n_loc = q.shape[1] * q.shape[2]
    q_cls = q
    if cfg.iacs_target == "anchor_norm":
        tl = [targets] if isinstance(targets, DenseTargets) else targets
        q_cls = np.stack([per_gt_normalized(t) for t in tl])
    elif cfg.iacs_target == "predicted":
        final = out["refined"] if cfg.refine_enabled else out["dist"]
        q_cls = np.where(pos, dist_iou(final, np.where(pos[..., None], tbox, 1.0)), 0.0)
    vfl, dlogit = varifocal_loss_logits(out["logit"], q_cls, cfg.vfl_alpha, cfg.vfl_gamma)
    npos = np.maximum(pos.reshape(n, -1).sum(axis=1), 1).astype(np.float64)
    norm = np.full(n, float(n_loc)) if cfg.vfl_norm == "locations" else npos
    per_sample = vfl.reshape(n, -1).sum(axis=1) / norm
    dlogit = dlogit / norm[:, None, None]
    wq = np.where(pos, q, 0.0) / npos[:, None, None]
    grads = {"logit": dlogit}
    keys = ["dist"] + (["refined"] if cfg.refine_enabled else [])
    for key in keys:
        pred = out[key]
        safe_t = np.where(pos[..., None], tbox, 1.0)
        lb, gb = giou_loss(pred, safe_t, wq)
        lb = np.where(pos, lb, 0.0)
        gb = np.where(pos[..., None], gb, 0.0)
        per_sample = per_sample + lb.reshape(n, -1).sum(axis=1)
        grads[key] = gb
    total = float(per_sample.mean())
    for k in grads:
        grads[k] = grads[k] / n
    return total, per_sample, grads


def backward(params: ModelParams, x, targets, cfg: DetectorConfig, loss_scale=1.0, accumulate=False):
    """Fill ``params.grad`` with d(loss_scale * total loss)/d params; returns the scaled loss."""
    out = forward(params, x, cfg, keep_cache=True)
    total, _, grads = loss_terms(out, targets, cfg)
    if not math.isfinite(total):
        raise NumericalFault("non-finite loss", layer="loss")
    if not accumulate:
        params.zero_grad()
    backprop(params, out, grads, cfg, loss_scale)
    return loss_scale * total


def backprop(params, out, grads, cfg, scale=1.0):
    p, g = params.p, params.g
    cache = out["cache"]
    feat, fr = cache["feat"], cache["fr"]
    n, c, gx, gy = feat.shape
    dlogit = scale * grads["logit"]
    ddist = scale * grads["dist"]
    dfeat_extra = None
    if cfg.refine_enabled:
        dref = scale * grads["refined"]
        dist, m = out["dist"], cache["m"]
        dm = dref * dist
        ddist = ddist + dref * m
        dd = dm * m * LN2 * (1.0 - cache["th"] ** 2)
        samp = cache["samp"]
        g["star.w"] += dd.reshape(-1, 4).T @ samp.reshape(-1, samp.shape[-1])
        g["star.b"] += dd.reshape(-1, 4).sum(axis=0)
        dsamp = (dd @ p["star.w"]).reshape(n, gx * gy * N_STAR, c)
        dfeat_extra, dpx, dpy = kernels.bilinear_backward(feat, cache["px"], cache["py"], dsamp)
        dpx = dpx.reshape(n, gx, gy, N_STAR)
        dpy = dpy.reshape(n, gx, gy, N_STAR)
        ddist = ddist + np.stack([dpx @ STAR_X[:, 0], dpy @ STAR_Y[:, 0],
                                  dpx @ STAR_X[:, 1], dpy @ STAR_Y[:, 1]], axis=-1)
    dreg = ddist * out["dist"]
    g["cls.w"][0] += np.einsum("nijc,nij->c", fr, dlogit)
    g["cls.b"][0] += dlogit.sum()
    g["reg.w"] += dreg.reshape(-1, 4).T @ fr.reshape(-1, c)
    g["reg.b"] += dreg.reshape(-1, 4).sum(axis=0)
    dfr = dlogit[..., None] * p["cls.w"][0] + dreg @ p["reg.w"]
    dh = dfr.transpose(0, 3, 1, 2)
    if dfeat_extra is not None:
        dh = dh + dfeat_extra
    for li, stride in ((3, 1), (2, 2), (1, 2)):
        z, sig = cache[f"z{li}"], cache[f"sig{li}"]
        dz = dh * sig * (1.0 + z * (1.0 - sig))
        dh, dw, db = _conv_bwd(dz, cache[f"cols{li}"], cache[f"in{li}"], p[f"conv{li}.w"], stride)
        g[f"conv{li}.w"] += dw
        g[f"conv{li}.b"] += db
    return params.grad


def total_loss(params, x, targets, cfg):
    out = forward(params, x, cfg)
    return loss_terms(out, targets, cfg)[0]


# ---------------------------------------------------------------- decoding


def decode(out, cfg: DetectorConfig, image_shape, index=0):
    """Boxes (pixels, clipped to the image) and scores for one batch element,
    restricted to locations above ``score_threshold`` and capped at
    ``max_per_slice``. Sorted by descending score, ties by location index.
    """
    nx, ny = image_shape
    score = out["score"][index]
    dist = out["refined" if cfg.refine_enabled and "refined" in out else "dist"][index]
    gx, gy = score.shape
    s = cfg.feature_stride
    flat_score = score.ravel()
    keep = np.nonzero(flat_score > cfg.score_threshold)[0]
    order = keep[np.argsort(-flat_score[keep], kind="stable")][: cfg.max_per_slice]
    ii, jj = np.unravel_index(order, (gx, gy))
    cx = (ii + 0.5) * s
    cy = (jj + 0.5) * s
    d = dist.reshape(-1, 4)[order] * s
    boxes = np.stack([cx - d[:, 0], cy - d[:, 1], cx + d[:, 2], cy + d[:, 3]], axis=1)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, nx)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, ny)
    return boxes, flat_score[order]
