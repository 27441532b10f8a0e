"""Numba kernel backend.

Explicit loops under ``@njit`` for the gather/scatter work; the
convolution contractions themselves go through ``np.dot`` on blocked
im2col matrices so they run on BLAS.  Blocks are capped so peak
scratch memory stays modest at any grid size.
"""

import numpy as np
from numba import njit

_BLOCK_COLS = 16384


@njit(cache=True)
def bilinear_accumulate(values, us, vs, valid, accum):
    K, H, W = values.shape
    N = us.shape[0]
    ok = np.zeros(N, dtype=np.bool_)
    x0a = np.empty(N, dtype=np.int64)
    y0a = np.empty(N, dtype=np.int64)
    x1a = np.empty(N, dtype=np.int64)
    y1a = np.empty(N, dtype=np.int64)
    w00 = np.empty(N, dtype=np.float64)
    w01 = np.empty(N, dtype=np.float64)
    w10 = np.empty(N, dtype=np.float64)
    w11 = np.empty(N, dtype=np.float64)
    for n in range(N):
        if not valid[n]:
            continue
        u = us[n]
        v = vs[n]
        if u < 0.0 or u > W - 1.0 or v < 0.0 or v > H - 1.0:
            continue
        x0 = int(np.floor(u))
        y0 = int(np.floor(v))
        x1 = x0 + 1 if x0 + 1 < W else W - 1
        y1 = y0 + 1 if y0 + 1 < H else H - 1
        fx = u - x0
        fy = v - y0
        ok[n] = True
        x0a[n] = x0
        y0a[n] = y0
        x1a[n] = x1
        y1a[n] = y1
        w00[n] = (1.0 - fx) * (1.0 - fy)
        w01[n] = fx * (1.0 - fy)
        w10[n] = (1.0 - fx) * fy
        w11[n] = fx * fy
    for k in range(K):
        ch = values[k]
        row = accum[k]
        for n in range(N):
            if not ok[n]:
                continue
            row[n] += (
                w00[n] * ch[y0a[n], x0a[n]]
                + w01[n] * ch[y0a[n], x1a[n]]
                + w10[n] * ch[y1a[n], x0a[n]]
                + w11[n] * ch[y1a[n], x1a[n]]
            )


@njit(cache=True)
def render_gaussian_peaks(channels, ks, us, vs, amps, sigma):
    K, H, W = channels.shape
    r = 3.0 * sigma
    inv = 1.0 / (2.0 * sigma * sigma)
    for j in range(len(ks)):
        u = us[j]
        v = vs[j]
        x_lo = max(0, int(np.ceil(u - r)))
        x_hi = min(W - 1, int(np.floor(u + r)))
        y_lo = max(0, int(np.ceil(v - r)))
        y_hi = min(H - 1, int(np.floor(v + r)))
        k = ks[j]
        a = amps[j]
        for y in range(y_lo, y_hi + 1):
            dy2 = (y - v) * (y - v)
            for x in range(x_lo, x_hi + 1):
                g = a * np.exp(-((x - u) * (x - u) + dy2) * inv)
                if g > channels[k, y, x]:
                    channels[k, y, x] = g


@njit(cache=True)
def _im2col_block(xp, col, k, stride, Yo, Zo, p0, p1):
    ci = xp.shape[0]
    r = 0
    for i in range(ci):
        for a in range(k):
            for bb in range(k):
                for c in range(k):
                    t = 0
                    for p in range(p0, p1):
                        ox = p // Yo
                        oy = p % Yo
                        row = xp[i, ox * stride + a, oy * stride + bb]
                        for oz in range(Zo):
                            col[r, t] = row[c + oz * stride]
                            t += 1
                    r += 1


@njit(cache=True)
def _pad3(x, pad):
    ci, X, Y, Z = x.shape
    xp = np.zeros((ci, X + 2 * pad, Y + 2 * pad, Z + 2 * pad), dtype=x.dtype)
    xp[:, pad : pad + X, pad : pad + Y, pad : pad + Z] = x
    return xp


@njit(cache=True)
def conv3d_forward(x, w, b, stride, pad):
    ci, X, Y, Z = x.shape
    co = w.shape[0]
    k = w.shape[2]
    Xo = (X + 2 * pad - k) // stride + 1
    Yo = (Y + 2 * pad - k) // stride + 1
    Zo = (Z + 2 * pad - k) // stride + 1
    xp = _pad3(x, pad)
    rows = ci * k * k * k
    N = Xo * Yo * Zo
    w2 = np.ascontiguousarray(w).reshape(co, rows)
    out2 = np.empty((co, N), dtype=x.dtype)
    bp = max(1, _BLOCK_COLS // Zo)
    npairs = Xo * Yo
    for p0 in range(0, npairs, bp):
        p1 = min(p0 + bp, npairs)
        nb = (p1 - p0) * Zo
        col = np.empty((rows, nb), dtype=x.dtype)
        _im2col_block(xp, col, k, stride, Yo, Zo, p0, p1)
        out2[:, p0 * Zo : p0 * Zo + nb] = np.dot(w2, col)
    for o in range(co):
        for t in range(N):
            out2[o, t] += b[o]
    return out2.reshape(co, Xo, Yo, Zo)


@njit(cache=True)
def conv3d_backward_input(dy, w, stride, pad, in_shape):
    X, Y, Z = in_shape
    co = w.shape[0]
    ci = w.shape[1]
    k = w.shape[2]
    Xo, Yo, Zo = dy.shape[1], dy.shape[2], dy.shape[3]
    rows = ci * k * k * k
    N = Xo * Yo * Zo
    w2t = np.ascontiguousarray(np.ascontiguousarray(w).reshape(co, rows).T)
    dy2 = np.ascontiguousarray(dy).reshape(co, N)
    dxp = np.zeros(
        (ci, X + 2 * pad, Y + 2 * pad, Z + 2 * pad), dtype=dy.dtype
    )
    bp = max(1, _BLOCK_COLS // Zo)
    npairs = Xo * Yo
    for p0 in range(0, npairs, bp):
        p1 = min(p0 + bp, npairs)
        nb = (p1 - p0) * Zo
        dyb = np.ascontiguousarray(dy2[:, p0 * Zo : p0 * Zo + nb])
        dcol = np.dot(w2t, dyb)
        r = 0
        for i in range(ci):
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        t = 0
                        for p in range(p0, p1):
                            ox = p // Yo
                            oy = p % Yo
                            row = dxp[i, ox * stride + a, oy * stride + bb]
                            for oz in range(Zo):
                                row[c + oz * stride] += dcol[r, t]
                                t += 1
                        r += 1
    return np.ascontiguousarray(
        dxp[:, pad : pad + X, pad : pad + Y, pad : pad + Z]
    )


@njit(cache=True)
def conv3d_backward_params(x, dy, k, stride, pad):
    ci = x.shape[0]
    co, Xo, Yo, Zo = dy.shape
    xp = _pad3(x, pad)
    rows = ci * k * k * k
    N = Xo * Yo * Zo
    dy2 = np.ascontiguousarray(dy).reshape(co, N)
    dwt = np.zeros((rows, co), dtype=dy.dtype)
    db = np.zeros(co, dtype=dy.dtype)
    for o in range(co):
        s = 0.0
        for t in range(N):
            s += dy2[o, t]
        db[o] = s
    bp = max(1, _BLOCK_COLS // Zo)
    npairs = Xo * Yo
    for p0 in range(0, npairs, bp):
        p1 = min(p0 + bp, npairs)
        nb = (p1 - p0) * Zo
        col = np.empty((rows, nb), dtype=x.dtype)
        _im2col_block(xp, col, k, stride, Yo, Zo, p0, p1)
        dybt = np.ascontiguousarray(dy2[:, p0 * Zo : p0 * Zo + nb].T)
        dwt += np.dot(col, dybt)
    dw = np.ascontiguousarray(dwt.T).reshape(co, ci, k, k, k)
    return dw, db


@njit(cache=True)
def nms_peak_mask(scores):
    X, Y, Z = scores.shape
    mask = np.zeros((X, Y, Z), dtype=np.bool_)
    for i in range(X):
        for j in range(Y):
            for l in range(Z):
                s = scores[i, j, l]
                ok = True
                for da in range(-1, 2):
                    ii = i + da
                    if ii < 0 or ii >= X:
                        continue
                    for db in range(-1, 2):
                        jj = j + db
                        if jj < 0 or jj >= Y:
                            continue
                        for dc in range(-1, 2):
                            if da == 0 and db == 0 and dc == 0:
                                continue
                            ll = l + dc
                            if ll < 0 or ll >= Z:
                                continue
                            nbv = scores[ii, jj, ll]
                            if nbv > s:
                                ok = False
                            elif nbv == s:
                                # equal neighbor with smaller lex index wins
                                if da < 0 or (
                                    da == 0
                                    and (db < 0 or (db == 0 and dc < 0))
                                ):
                                    ok = False
                            if not ok:
                                break
                        if not ok:
                            break
                    if not ok:
                        break
                mask[i, j, l] = ok
    return mask
