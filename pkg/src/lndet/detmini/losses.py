"""Varifocal loss and GIoU box loss with analytic derivatives."""
import logging

import numpy as np

log = logging.getLogger(__name__)

EPS = 1e-7


def varifocal_loss(p, q, alpha=0.75, gamma=2.0):
    """Elementwise varifocal loss and its derivative with respect to ``p``.

    Positives (q > 0) use the q-weighted binary cross entropy against the
    soft target q; negatives use ``-alpha * p**gamma * log(1 - p)``.
    ``p`` is clamped to [EPS, 1 - EPS]; the derivative is that of the loss
    evaluated at the clamped point.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pc = np.clip(p, EPS, 1.0 - EPS)
    if np.any(pc != p):
        log.debug("varifocal_loss: clamped %d scores to [%g, 1-%g]", int(np.sum(pc != p)), EPS, EPS)
    lp, l1p = np.log(pc), np.log1p(-pc)
    pos = q > 0
    loss_pos = -q * (q * lp + (1.0 - q) * l1p)
    grad_pos = -q * (q / pc - (1.0 - q) / (1.0 - pc))
    pg = pc ** gamma
    loss_neg = -alpha * pg * l1p
    grad_neg = -alpha * (gamma * pc ** (gamma - 1.0) * l1p - pg / (1.0 - pc))
    return np.where(pos, loss_pos, loss_neg), np.where(pos, grad_pos, grad_neg)


def _softplus(z):
    return np.logaddexp(0.0, z)


def varifocal_loss_logits(z, q, alpha=0.75, gamma=2.0):
    """Same loss parameterized by the logit ``z`` (p = sigmoid(z)); returns dL/dz.

    Uses log p = -softplus(-z) and log(1 - p) = -softplus(z), so no clamping
    is needed.
    """
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    sp_pos = _softplus(z)
    sp_neg = _softplus(-z)
    pos = q > 0
    loss_pos = q * (q * sp_neg + (1.0 - q) * sp_pos)
    grad_pos = q * (p - q)
    pg = p ** gamma
    loss_neg = alpha * pg * sp_pos
    grad_neg = alpha * pg * (gamma * (1.0 - p) * sp_pos + p)
    return np.where(pos, loss_pos, loss_neg), np.where(pos, grad_pos, grad_neg)


def giou_loss(pred, target, weight=1.0):
    """``weight * (1 - GIoU)`` between boxes given as (l, t, r, b) distances
    from a shared anchor point. Returns (loss, d loss / d pred).

    Arrays have trailing dimension 4. Ties in min/max pick the predicted side.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    l, t, r, b = np.moveaxis(pred, -1, 0)
    lt, tt, rt, bt = np.moveaxis(target, -1, 0)

    iw = np.minimum(l, lt) + np.minimum(r, rt)
    ih = np.minimum(t, tt) + np.minimum(b, bt)
    iwp = np.maximum(iw, 0.0)
    ihp = np.maximum(ih, 0.0)
    inter = iwp * ihp
    area_p = (l + r) * (t + b)
    area_t = (lt + rt) * (tt + bt)
    union = area_p + area_t - inter
    cw = np.maximum(l, lt) + np.maximum(r, rt)
    chh = np.maximum(t, tt) + np.maximum(b, bt)
    encl = cw * chh
    giou = inter / union - (encl - union) / encl
    loss = w * (1.0 - giou)

    # d inter
    wpos = (iw > 0).astype(np.float64)
    hpos = (ih > 0).astype(np.float64)
    dI = np.stack([(l <= lt) * wpos * ihp, (t <= tt) * hpos * iwp,
                   (r <= rt) * wpos * ihp, (b <= bt) * hpos * iwp], axis=-1)
    dA = np.stack([t + b, l + r, t + b, l + r], axis=-1)
    dU = dA - dI
    dC = np.stack([(l >= lt) * chh, (t >= tt) * cw, (r >= rt) * chh, (b >= bt) * cw], axis=-1)
    inter_, union_, encl_ = inter[..., None], union[..., None], encl[..., None]
    dgiou = (dI * union_ - inter_ * dU) / union_ ** 2 + (dU * encl_ - union_ * dC) / encl_ ** 2
    grad = -w[..., None] * dgiou if w.ndim else -w * dgiou
    return loss, grad


def box_loss(pred, target, weight=1.0):
    """Weighted GIoU loss for one positive location; alias kept for the public API."""
    return giou_loss(pred, target, weight)
