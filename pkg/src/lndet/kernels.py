"""Hot inner loops of the detector: im2col/col2im and bilinear sampling.

Every kernel exists twice: a numba ``@njit`` loop version (``*_nb``) and a
vectorized numpy version (``*_np``). The public names dispatch on
``lndet._accel.USE_NUMBA``. Both versions produce identical values for the
gather kernels; scatter kernels may differ in the last ulp because the
summation order differs.

Array layout is (N, C, H, W) throughout. For images ``H`` runs along the
x axis and ``W`` along the y axis.
"""
import numpy as np

from . import _accel
from ._accel import njit


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- im2col


@njit
def im2col_nb(x, k, stride, pad):
    n_b, n_c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((n_b, oh, ow, n_c * k * k), dtype=x.dtype)
    for b in range(n_b):
        for i in range(oh):
            for j in range(ow):
                for c in range(n_c):
                    for u in range(k):
                        xi = i * stride + u - pad
                        if xi < 0 or xi >= h:
                            continue
                        for v in range(k):
                            yj = j * stride + v - pad
                            if yj < 0 or yj >= w:
                                continue
                            cols[b, i, j, (c * k + u) * k + v] = x[b, c, xi, yj]
    return cols


def im2col_np(x, k, stride, pad):
    n_b, n_c, h, w = x.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n_b, oh, ow, n_c, k, k), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            patch = xp[:, :, u:u + stride * (oh - 1) + 1:stride, v:v + stride * (ow - 1) + 1:stride]
            cols[:, :, :, :, u, v] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n_b, oh, ow, n_c * k * k)


@njit
def col2im_nb(dcols, shape, k, stride, pad):
    n_b, n_c, h, w = shape
    oh = dcols.shape[1]
    ow = dcols.shape[2]
    dx = np.zeros((n_b, n_c, h, w), dtype=dcols.dtype)
    for b in range(n_b):
        for i in range(oh):
            for j in range(ow):
                for c in range(n_c):
                    for u in range(k):
                        xi = i * stride + u - pad
                        if xi < 0 or xi >= h:
                            continue
                        for v in range(k):
                            yj = j * stride + v - pad
                            if yj < 0 or yj >= w:
                                continue
                            dx[b, c, xi, yj] += dcols[b, i, j, (c * k + u) * k + v]
    return dx


def col2im_np(dcols, shape, k, stride, pad):
    n_b, n_c, h, w = shape
    oh, ow = dcols.shape[1], dcols.shape[2]
    d6 = dcols.reshape(n_b, oh, ow, n_c, k, k)
    dxp = np.zeros((n_b, n_c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + stride * (oh - 1) + 1:stride, v:v + stride * (ow - 1) + 1:stride] += \
                d6[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + h, pad:pad + w]


# ------------------------------------------------------- bilinear sampling
# Zero padding outside the map keeps the sampled value continuous in the
# sample position everywhere.


@njit
def bilinear_gather_nb(feat, px, py):
    n_b, n_c, h, w = feat.shape
    n_p = px.shape[1]
    out = np.zeros((n_b, n_p, n_c), dtype=feat.dtype)
    for b in range(n_b):
        for p in range(n_p):
            x = px[b, p]
            y = py[b, p]
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            for dx in range(2):
                xi = x0 + dx
                if xi < 0 or xi >= h:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= w:
                        continue
                    wgt = wx * (fy if dy == 1 else 1.0 - fy)
                    for c in range(n_c):
                        out[b, p, c] += wgt * feat[b, c, xi, yi]
    return out


@njit
def bilinear_backward_nb(feat, px, py, gout):
    n_b, n_c, h, w = feat.shape
    n_p = px.shape[1]
    dfeat = np.zeros_like(feat)
    dpx = np.zeros_like(px)
    dpy = np.zeros_like(py)
    for b in range(n_b):
        for p in range(n_p):
            x = px[b, p]
            y = py[b, p]
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            gx = 0.0
            gy = 0.0
            for dx in range(2):
                xi = x0 + dx
                if xi < 0 or xi >= h:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                sx = 1.0 if dx == 1 else -1.0
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= w:
                        continue
                    wy = fy if dy == 1 else 1.0 - fy
                    sy = 1.0 if dy == 1 else -1.0
                    acc = 0.0
                    for c in range(n_c):
                        g = gout[b, p, c]
                        dfeat[b, c, xi, yi] += wx * wy * g
                        acc += g * feat[b, c, xi, yi]
                    gx += sx * wy * acc
                    gy += sy * wx * acc
            dpx[b, p] = gx
            dpy[b, p] = gy
    return dfeat, dpx, dpy


def _corners(feat, px, py):
    n_b, n_c, h, w = feat.shape
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.broadcast_to(np.arange(n_b)[:, None], px.shape)
    for dx in (0, 1):
        for dy in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < h) & (yi >= 0) & (yi < w)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            sx = 1.0 if dx else -1.0
            sy = 1.0 if dy else -1.0
            yield bidx, np.clip(xi, 0, h - 1), np.clip(yi, 0, w - 1), ok, wx, wy, sx, sy


def bilinear_gather_np(feat, px, py):
    n_b, n_c = feat.shape[:2]
    out = np.zeros((n_b, px.shape[1], n_c), dtype=feat.dtype)
    fl = feat.transpose(0, 2, 3, 1)
    for bidx, xi, yi, ok, wx, wy, _, _ in _corners(feat, px, py):
        out += (wx * wy * ok)[..., None] * fl[bidx, xi, yi]
    return out


def bilinear_backward_np(feat, px, py, gout):
    n_b, n_c, h, w = feat.shape
    dfl = np.zeros((n_b, h, w, n_c), dtype=feat.dtype)
    fl = feat.transpose(0, 2, 3, 1)
    dpx = np.zeros_like(px)
    dpy = np.zeros_like(py)
    for bidx, xi, yi, ok, wx, wy, sx, sy in _corners(feat, px, py):
        okf = ok.astype(feat.dtype)
        np.add.at(dfl, (bidx, xi, yi), (wx * wy * okf)[..., None] * gout)
        acc = np.einsum("bpc,bpc->bp", gout, fl[bidx, xi, yi]) * okf
        dpx += sx * wy * acc
        dpy += sy * wx * acc
    return dfl.transpose(0, 3, 1, 2), dpx, dpy


# ---------------------------------------------------------------- dispatch


def im2col(x, k, stride, pad):
    if _accel.USE_NUMBA:
        return im2col_nb(np.ascontiguousarray(x), k, stride, pad)
    return im2col_np(x, k, stride, pad)


def col2im(dcols, shape, k, stride, pad):
    if _accel.USE_NUMBA:
        return col2im_nb(np.ascontiguousarray(dcols), tuple(shape), k, stride, pad)
    return col2im_np(dcols, shape, k, stride, pad)


def bilinear_gather(feat, px, py):
    if _accel.USE_NUMBA:
        return bilinear_gather_nb(np.ascontiguousarray(feat), np.ascontiguousarray(px),
                                  np.ascontiguousarray(py))
    return bilinear_gather_np(feat, px, py)


def bilinear_backward(feat, px, py, gout):
    if _accel.USE_NUMBA:
        return bilinear_backward_nb(np.ascontiguousarray(feat), np.ascontiguousarray(px),
                                    np.ascontiguousarray(py), np.ascontiguousarray(gout))
    return bilinear_backward_np(feat, px, py, gout)
