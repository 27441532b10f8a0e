"""Vectorized pure-numpy kernel backend.

Convolutions are computed as one tensordot per kernel offset, which
keeps peak memory at a single activation copy and runs on BLAS.
"""

import numpy as np


def bilinear_accumulate(values, us, vs, valid, accum):
    K, H, W = values.shape
    ok = valid & (us >= 0.0) & (us <= W - 1.0) & (vs >= 0.0) & (vs <= H - 1.0)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return
    u = us[idx]
    v = vs[idx]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = u - x0
    fy = v - y0
    top = (1.0 - fx) * values[:, y0, x0] + fx * values[:, y0, x1]
    bot = (1.0 - fx) * values[:, y1, x0] + fx * values[:, y1, x1]
    accum[:, idx] += (1.0 - fy) * top + fy * bot


def render_gaussian_peaks(channels, ks, us, vs, amps, sigma):
    K, H, W = channels.shape
    r = 3.0 * sigma
    inv = 1.0 / (2.0 * sigma * sigma)
    for j in range(len(ks)):
        u = float(us[j])
        v = float(vs[j])
        x_lo = max(0, int(np.ceil(u - r)))
        x_hi = min(W - 1, int(np.floor(u + r)))
        y_lo = max(0, int(np.ceil(v - r)))
        y_hi = min(H - 1, int(np.floor(v + r)))
        if x_lo > x_hi or y_lo > y_hi:
            continue
        xs = np.arange(x_lo, x_hi + 1, dtype=np.float64) - u
        ys = np.arange(y_lo, y_hi + 1, dtype=np.float64) - v
        g = amps[j] * np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) * inv)
        patch = channels[ks[j], y_lo : y_hi + 1, x_lo : x_hi + 1]
        np.maximum(patch, g.astype(channels.dtype), out=patch)


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad3(x, pad):
    if pad == 0:
        return x
    ci, X, Y, Z = x.shape
    xp = np.zeros((ci, X + 2 * pad, Y + 2 * pad, Z + 2 * pad), dtype=x.dtype)
    xp[:, pad : pad + X, pad : pad + Y, pad : pad + Z] = x
    return xp


def conv3d_forward(x, w, b, stride, pad):
    ci, X, Y, Z = x.shape
    co, _, k, _, _ = w.shape
    Xo = _out_size(X, k, stride, pad)
    Yo = _out_size(Y, k, stride, pad)
    Zo = _out_size(Z, k, stride, pad)
    xp = _pad3(x, pad)
    out = np.zeros((co, Xo, Yo, Zo), dtype=x.dtype)
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                sl = xp[
                    :,
                    a : a + stride * Xo : stride,
                    bb : bb + stride * Yo : stride,
                    c : c + stride * Zo : stride,
                ]
                out += np.tensordot(w[:, :, a, bb, c], sl, axes=([1], [0]))
    out += b[:, None, None, None].astype(x.dtype)
    return out


def conv3d_backward_input(dy, w, stride, pad, in_shape):
    X, Y, Z = in_shape
    co, ci, k, _, _ = w.shape
    Xo, Yo, Zo = dy.shape[1:]
    dxp = np.zeros(
        (ci, X + 2 * pad, Y + 2 * pad, Z + 2 * pad), dtype=dy.dtype
    )
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                contrib = np.tensordot(w[:, :, a, bb, c], dy, axes=([0], [0]))
                dxp[
                    :,
                    a : a + stride * Xo : stride,
                    bb : bb + stride * Yo : stride,
                    c : c + stride * Zo : stride,
                ] += contrib
    return np.ascontiguousarray(
        dxp[:, pad : pad + X, pad : pad + Y, pad : pad + Z]
    )


def conv3d_backward_params(x, dy, k, stride, pad):
    ci = x.shape[0]
    co, Xo, Yo, Zo = dy.shape
    xp = _pad3(x, pad)
    dw = np.empty((co, ci, k, k, k), dtype=dy.dtype)
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                sl = xp[
                    :,
                    a : a + stride * Xo : stride,
                    bb : bb + stride * Yo : stride,
                    c : c + stride * Zo : stride,
                ]
                dw[:, :, a, bb, c] = np.tensordot(
                    dy, sl, axes=([1, 2, 3], [1, 2, 3])
                )
    db = dy.sum(axis=(1, 2, 3))
    return dw, db


_NEIGHBOR_OFFSETS = [
    (da, db, dc)
    for da in (-1, 0, 1)
    for db in (-1, 0, 1)
    for dc in (-1, 0, 1)
    if (da, db, dc) != (0, 0, 0)
]


def nms_peak_mask(scores):
    X, Y, Z = scores.shape
    padded = np.full((X + 2, Y + 2, Z + 2), -np.inf, dtype=np.float64)
    padded[1:-1, 1:-1, 1:-1] = scores
    mask = np.ones((X, Y, Z), dtype=bool)
    for da, db, dc in _NEIGHBOR_OFFSETS:
        nb = padded[1 + da : 1 + da + X, 1 + db : 1 + db + Y, 1 + dc : 1 + dc + Z]
        if (da, db, dc) > (0, 0, 0):
            # neighbor has the larger lexicographic index: ties go to us
            mask &= scores >= nb
        else:
            mask &= scores > nb
    return mask
