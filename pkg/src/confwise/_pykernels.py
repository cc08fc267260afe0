"""Numpy implementations of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    # (cin, h, w, k, k)
    return sliding_window_view(xp, (k, k), axis=(1, 2))


def conv2d_forward(x, w, b):
    k = w.shape[2]
    cols = _windows(x, k)
    y = np.einsum("chwyx,ocyx->ohw", cols, w, optimize=True)
    y += b[:, None, None]
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv2d_backward(x, w, gy, need_gx=True):
    k = w.shape[2]
    pad = k // 2
    cols = _windows(x, k)
    gb = gy.sum(axis=(1, 2))
    gw = np.einsum("ohw,chwyx->ocyx", gy, cols, optimize=True)
    if not need_gx:
        return None, np.ascontiguousarray(gw, dtype=x.dtype), np.ascontiguousarray(gb, dtype=x.dtype)
    # full correlation with the flipped kernel
    gyp = np.pad(gy, ((0, 0), (pad, pad), (pad, pad)))
    gcols = sliding_window_view(gyp, (k, k), axis=(1, 2))
    gx = np.einsum("ohwyx,ocyx->chw", gcols, w[:, :, ::-1, ::-1], optimize=True)
    return (
        np.ascontiguousarray(gx, dtype=x.dtype),
        np.ascontiguousarray(gw, dtype=x.dtype),
        np.ascontiguousarray(gb, dtype=x.dtype),
    )


def dilate(mask, radius, cross):
    h, w = mask.shape
    src = mask.astype(bool)
    out = np.zeros((h, w), dtype=bool)
    for di in range(-radius, radius + 1):
        reach = radius - abs(di) if cross else radius
        for dj in range(-reach, reach + 1):
            # out[i, j] |= src[i - di, j - dj]
            ys, yd = (slice(0, h - di), slice(di, h)) if di >= 0 else (slice(-di, h), slice(0, h + di))
            xs, xd = (slice(0, w - dj), slice(dj, w)) if dj >= 0 else (slice(-dj, w), slice(0, w + dj))
            out[yd, xd] |= src[ys, xs]
    return out.astype(np.uint8)


def squared_edt(features, chunk=4096):
    h, w = features.shape
    pts = np.argwhere(features)
    if len(pts) == 0:
        return np.full((h, w), np.inf)
    grid = np.indices((h, w)).reshape(2, -1).T
    out = np.empty(h * w)
    for start in range(0, h * w, chunk):
        g = grid[start:start + chunk]
        d = ((g[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = d.min(axis=1)
    return out.reshape(h, w)
