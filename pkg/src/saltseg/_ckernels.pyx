# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Bitwise compatible with saltseg._kernels_py."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

BACKEND = "cython"


def im2col(double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out = np.empty((n, c, k, k, ho, wo))
    cdef double[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t a, b, i, j, oy, ox, y, xx
    with nogil:
        for a in range(n):
            for b in range(c):
                for i in range(k):
                    for j in range(k):
                        for oy in range(ho):
                            y = oy * stride + i - pad
                            for ox in range(wo):
                                xx = ox * stride + j - pad
                                if 0 <= y < h and 0 <= xx < w:
                                    cols[a, b, i, j, oy, ox] = x[a, b, y, xx]
                                else:
                                    cols[a, b, i, j, oy, ox] = 0.0
    return out


def col2im(double[:, :, :, :, :, ::1] cols, int h, int w, int k, int stride, int pad):
    cdef Py_ssize_t n = cols.shape[0], c = cols.shape[1]
    cdef Py_ssize_t ho = cols.shape[4], wo = cols.shape[5]
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] img = out
    cdef Py_ssize_t a, b, i, j, oy, ox, y, xx
    # same (i, j) accumulation order as the numpy reference
    with nogil:
        for a in range(n):
            for b in range(c):
                for i in range(k):
                    for j in range(k):
                        for oy in range(ho):
                            y = oy * stride + i - pad
                            if y < 0 or y >= h:
                                continue
                            for ox in range(wo):
                                xx = ox * stride + j - pad
                                if 0 <= xx < w:
                                    img[a, b, y, xx] += cols[a, b, i, j, oy, ox]
    return out


def maxpool_forward(double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.empty((n, c, ho, wo))
    arg_arr = np.zeros((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t a, b, oy, ox, i, j, y, xx, best_idx
    cdef double best, v
    with nogil:
        for a in range(n):
            for b in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = -INFINITY
                        best_idx = 0
                        for i in range(k):
                            y = oy * stride + i - pad
                            for j in range(k):
                                xx = ox * stride + j - pad
                                if 0 <= y < h and 0 <= xx < w:
                                    v = x[a, b, y, xx]
                                else:
                                    v = -INFINITY
                                if v > best:
                                    best = v
                                    best_idx = y * w + xx
                        out[a, b, oy, ox] = best
                        arg[a, b, oy, ox] = best_idx
    return out_arr, arg_arr


def maxpool_backward(double[:, :, :, ::1] grad_out, cnp.int64_t[:, :, :, ::1] arg, int h, int w):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    gin_arr = np.zeros((n, c, h * w))
    cdef double[:, :, ::1] gin = gin_arr
    cdef Py_ssize_t a, b, oy, ox
    with nogil:
        for a in range(n):
            for b in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        gin[a, b, arg[a, b, oy, ox]] += grad_out[a, b, oy, ox]
    return gin_arr.reshape(n, c, h, w)


def label_components(mask, int connectivity):
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] lab = labels_arr
    queue_arr = np.empty(max(h * w, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr
    areas = []
    cdef int dys4[4]
    cdef int dxs4[4]
    cdef int dys8[8]
    cdef int dxs8[8]
    dys4[:] = [-1, 1, 0, 0]
    dxs4[:] = [0, 0, -1, 1]
    dys8[:] = [-1, -1, -1, 0, 0, 1, 1, 1]
    dxs8[:] = [-1, 0, 1, -1, 1, -1, 0, 1]
    cdef int* dys = &dys8[0]
    cdef int* dxs = &dxs8[0]
    cdef int nn = 8
    if connectivity == 4:
        dys = &dys4[0]
        dxs = &dxs4[0]
        nn = 4
    cdef int current = 0
    cdef Py_ssize_t r, cc, head, tail, y, x, yy, xx, t
    cdef long area
    for r in range(h):
        for cc in range(w):
            if m[r, cc] == 0 or lab[r, cc] != 0:
                continue
            current += 1
            lab[r, cc] = current
            head = 0
            tail = 0
            queue[tail] = r * w + cc
            tail += 1
            area = 0
            while head < tail:
                y = queue[head] // w
                x = queue[head] % w
                head += 1
                area += 1
                for t in range(nn):
                    yy = y + dys[t]
                    xx = x + dxs[t]
                    if 0 <= yy < h and 0 <= xx < w and m[yy, xx] != 0 and lab[yy, xx] == 0:
                        lab[yy, xx] = current
                        queue[tail] = yy * w + xx
                        tail += 1
            areas.append(area)
    return labels_arr, np.array(areas, dtype=np.int64)
