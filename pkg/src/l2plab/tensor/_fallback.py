"""Pure-NumPy versions of the compiled kernels (same accumulation order)."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(N, Ho, Wo, C, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(N * Ho * Wo, C * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    N, C, H, W = x_shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    cols6 = cols.reshape(N, Ho, Wo, C, kh, kw)
    dx = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        dx = dx[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(dx)


def avg_pool_forward(x, k):
    N, C, H, W = x.shape
    out = np.zeros((N, C, H // k, W // k))
    for i in range(k):
        for j in range(k):
            out += x[:, :, i::k, j::k]
    return out / (k * k)


def avg_pool_backward(g, k):
    return np.ascontiguousarray(np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k))
