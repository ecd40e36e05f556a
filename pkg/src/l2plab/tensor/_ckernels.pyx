# cython: cdivision=True
"""Compiled im2col/col2im and pooling loops.

Accumulation order matches ``_fallback`` exactly so both backends produce
bitwise-identical results.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t K = C * kh * kw
    out_arr = np.empty((N * Ho * Wo, K), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, ho, wo, row, col, yy, xx
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    row = (n * Ho + ho) * Wo + wo
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            yy = ho * stride + i - pad
                            for j in range(kw):
                                xx = wo * stride + j - pad
                                if 0 <= yy < H and 0 <= xx < W:
                                    out[row, col] = x[n, c, yy, xx]
                                else:
                                    out[row, col] = 0.0
                                col += 1
    return out_arr


def col2im(const double[:, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dx_arr = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, i, j, ho, wo, yy, xx, col
    # per-element accumulation runs over (i, j) in kernel order, as in the fallback
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        col = (c * kh + i) * kw + j
                        for ho in range(Ho):
                            yy = ho * stride + i - pad
                            if yy < 0 or yy >= H:
                                continue
                            for wo in range(Wo):
                                xx = wo * stride + j - pad
                                if 0 <= xx < W:
                                    dx[n, c, yy, xx] += cols[(n * Ho + ho) * Wo + wo, col]
    return dx_arr


def avg_pool_forward(const double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] // k, Wo = x.shape[3] // k
    out_arr = np.zeros((N, C, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double area = k * k
    cdef Py_ssize_t n, c, i, j, ho, wo
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        for ho in range(Ho):
                            for wo in range(Wo):
                                out[n, c, ho, wo] += x[n, c, ho * k + i, wo * k + j]
                for ho in range(Ho):
                    for wo in range(Wo):
                        out[n, c, ho, wo] = out[n, c, ho, wo] / area
    return out_arr


def avg_pool_backward(const double[:, :, :, ::1] g, int k):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    dx_arr = np.empty((N, C, Ho * k, Wo * k), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double area = k * k
    cdef double v
    cdef Py_ssize_t n, c, i, j, a, b
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(Ho):
                    for a in range(k):
                        for j in range(Wo):
                            v = g[n, c, i, j] / area
                            for b in range(k):
                                dx[n, c, i * k + a, j * k + b] = v
    return dx_arr
