"""Reference kernels in numpy / plain Python.

Used when the compiled extension is unavailable or SALTSEG_PURE_PYTHON=1.
Results are bitwise identical to the compiled versions.
"""
from collections import deque

import numpy as np

BACKEND = "python"


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                  j:j + stride * (wo - 1) + 1:stride]
    return cols


def col2im(cols, h, w, k, stride, pad):
    n, c, _, _, ho, wo = cols.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def maxpool_forward(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    out = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    rows = np.arange(ho) * stride
    cols = np.arange(wo) * stride
    # row-major window scan with strict '>' keeps the lowest linear index on ties
    for i in range(k):
        for j in range(k):
            v = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                   j:j + stride * (wo - 1) + 1:stride]
            better = v > out
            out = np.where(better, v, out)
            lin = (rows[:, None] + i - pad) * w + (cols[None, :] + j - pad)
            arg = np.where(better, lin, arg)
    return out, arg


def maxpool_backward(grad_out, arg, h, w):
    n, c = grad_out.shape[:2]
    gin = np.zeros((n * c, h * w))
    flat_arg = arg.reshape(n * c, -1)
    flat_g = grad_out.reshape(n * c, -1)
    offs = (np.arange(n * c) * (h * w))[:, None]
    np.add.at(gin.reshape(-1), (flat_arg + offs).reshape(-1), flat_g.reshape(-1))
    return gin.reshape(n, c, h, w)


def label_components(mask, connectivity):
    """Label foreground components in raster order of their first pixel.

    Returns (labels int32 array, areas int64 array indexed by label - 1).
    """
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if connectivity == 4:
        nbrs = ((-1, 0), (1, 0), (0, -1), (0, 1))
    else:
        nbrs = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
    fg = mask.astype(bool).tolist()
    lab = labels.tolist()
    areas = []
    current = 0
    for r in range(h):
        for c in range(w):
            if not fg[r][c] or lab[r][c]:
                continue
            current += 1
            lab[r][c] = current
            queue = deque([(r, c)])
            area = 0
            while queue:
                y, x = queue.popleft()
                area += 1
                for dy, dx in nbrs:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and fg[yy][xx] and not lab[yy][xx]:
                        lab[yy][xx] = current
                        queue.append((yy, xx))
            areas.append(area)
    return np.array(lab, dtype=np.int32).reshape(h, w), np.array(areas, dtype=np.int64)
