# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution, max-pooling and bilinear resampling.

Every routine mirrors a function of the same name in :mod:`renet._kernels_py`
and must return identical results (same accumulation order).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _col_range(Py_ssize_t kj, Py_ssize_t ow, Py_ssize_t w, int stride, int pad,
                            Py_ssize_t* j0, Py_ssize_t* j1) noexcept nogil:
    # output columns j whose source column j * stride + kj - pad lies inside [0, w)
    cdef Py_ssize_t lo = pad - kj, hi = w - 1 + pad - kj
    j0[0] = 0 if lo <= 0 else (lo + stride - 1) // stride
    j1[0] = 0 if hi < 0 else hi // stride + 1
    if j1[0] > ow:
        j1[0] = ow


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((c * kh * kw, n * oh * ow), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, b, i, j, j0, j1, row, col, y
    with nogil:
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ci * kh + ki) * kw + kj
                    _col_range(kj, ow, w, stride, pad, &j0, &j1)
                    for b in range(n):
                        for i in range(oh):
                            y = i * stride + ki - pad
                            if y < 0 or y >= h:
                                continue
                            col = (b * oh + i) * ow
                            if stride == 1:
                                if j1 > j0:
                                    memcpy(&out[row, col + j0], &x[b, ci, y, j0 + kj - pad], (j1 - j0) * sizeof(real))
                                continue
                            for j in range(j0, j1):
                                out[row, col + j] = x[b, ci, y, j * stride + kj - pad]
    return out_arr


def col2im(real[:, ::1] cols, int n, int c, int h, int w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, b, i, j, j0, j1, row, col, y
    with nogil:
        for ki in range(kh):
            for kj in range(kw):
                for ci in range(c):
                    row = (ci * kh + ki) * kw + kj
                    _col_range(kj, ow, w, stride, pad, &j0, &j1)
                    for b in range(n):
                        for i in range(oh):
                            y = i * stride + ki - pad
                            if y < 0 or y >= h:
                                continue
                            col = (b * oh + i) * ow
                            for j in range(j0, j1):
                                out[b, ci, y, j * stride + kj - pad] += cols[row, col + j]
    return out_arr


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ci, i, j, a, bb, y, xx, best_i
    cdef real best, v
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        y = i * stride
                        xx = j * stride
                        best = x[b, ci, y, xx]
                        best_i = y * w + xx
                        for a in range(k):
                            for bb in range(k):
                                v = x[b, ci, y + a, xx + bb]
                                # strict ">" keeps the first maximum in row-major order
                                if v > best:
                                    best = v
                                    best_i = (y + a) * w + xx + bb
                        out[b, ci, i, j] = best
                        idx[b, ci, i, j] = best_i
    return out_arr, idx_arr


def maxpool_backward(real[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] idx, int h, int w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], oh = dout.shape[2], ow = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, flat
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        flat = idx[b, ci, i, j]
                        out[b, ci, flat // w, flat % w] += dout[b, ci, i, j]
    return out_arr


def bilinear_sample(real[:, ::1] img, double[:, ::1] us, double[:, ::1] vs, double fill):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t oh = us.shape[0], ow = us.shape[1]
    out_arr = np.empty((oh, ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, x0, y0, x1, y1
    cdef double u, v, fx, fy, p00, p01, p10, p11
    with nogil:
        for i in range(oh):
            for j in range(ow):
                u = us[i, j]
                v = vs[i, j]
                x0 = <Py_ssize_t>floor(u)
                y0 = <Py_ssize_t>floor(v)
                fx = u - x0
                fy = v - y0
                x1 = x0 + 1
                y1 = y0 + 1
                p00 = img[y0, x0] if 0 <= x0 < w and 0 <= y0 < h else fill
                p01 = img[y0, x1] if 0 <= x1 < w and 0 <= y0 < h else fill
                p10 = img[y1, x0] if 0 <= x0 < w and 0 <= y1 < h else fill
                p11 = img[y1, x1] if 0 <= x1 < w and 0 <= y1 < h else fill
                out[i, j] = ((p00 * (1.0 - fx) + p01 * fx) * (1.0 - fy)
                             + (p10 * (1.0 - fx) + p11 * fx) * fy)
    return out_arr
