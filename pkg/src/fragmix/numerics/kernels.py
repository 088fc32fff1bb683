"""im2col / col2im kernels backing ``conv2d``.

Column layout: ``cols[n, c, i * kw + j, oy * ow + ox]`` holds
``x_padded[n, c, oy * stride + i, ox * stride + j]``.
"""

from __future__ import annotations

import numpy as np

from .._accel import njit, pick


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col_numpy(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh * kw, oh * ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, :, i * kw + j, :] = patch.reshape(n, c, oh * ow)
    return cols


def col2im_numpy(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, i * kw + j, :
            ].reshape(n, c, oh, ow)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])
    return xp


@njit
def _im2col_loops(x, kh, kw, stride, pad, oh, ow, cols):
    n, c, h, w = x.shape
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    r = i * kw + j
                    for oy in range(oh):
                        y = oy * stride + i - pad
                        base = oy * ow
                        if y < 0 or y >= h:
                            for ox in range(ow):
                                cols[b, ch, r, base + ox] = 0.0
                            continue
                        for ox in range(ow):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                cols[b, ch, r, base + ox] = 0.0
                            else:
                                cols[b, ch, r, base + ox] = x[b, ch, y, xx]
    return cols


@njit
def _col2im_loops(cols, kh, kw, stride, pad, oh, ow, out):
    n, c, h, w = out.shape
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    r = i * kw + j
                    for oy in range(oh):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        base = oy * ow
                        for ox in range(ow):
                            xx = ox * stride + j - pad
                            if xx >= 0 and xx < w:
                                out[b, ch, y, xx] += cols[b, ch, r, base + ox]
    return out


def im2col_numba(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = np.empty((n, c, kh * kw, oh * ow), dtype=x.dtype)
    return _im2col_loops(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow, cols)


def col2im_numba(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    return _col2im_loops(np.ascontiguousarray(cols), kh, kw, stride, pad, oh, ow, out)


im2col = pick(im2col_numba, im2col_numpy)
col2im = pick(col2im_numba, col2im_numpy)
