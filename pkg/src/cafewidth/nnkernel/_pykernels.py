"""Pure numpy versions of the compiled kernels; same signatures and layouts."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, p):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x, K):
    N, C, H, W = x.shape
    v = sliding_window_view(_pad(x, K // 2), (K, K), axis=(2, 3))
    return np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(N * H * W, C * K * K)


def col2im(cols, N, C, H, W, K):
    p = K // 2
    d = cols.reshape(N, H, W, C, K, K)
    dxp = np.zeros((N, C, H + 2 * p, W + 2 * p))
    for ki in range(K):
        for kj in range(K):
            dxp[:, :, ki:ki + H, kj:kj + W] += d[..., ki, kj].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, p:p + H, p:p + W])


def dw_forward(x, wt):
    N, C, H, W = x.shape
    K = wt.shape[1]
    xp = _pad(x, K // 2)
    y = np.zeros_like(x)
    for ki in range(K):
        for kj in range(K):
            y += wt[None, :, ki, kj, None, None] * xp[:, :, ki:ki + H, kj:kj + W]
    return y


def dw_backward(x, wt, dy):
    N, C, H, W = x.shape
    K = wt.shape[1]
    p = K // 2
    xp = _pad(x, p)
    dxp = np.zeros_like(xp)
    dw = np.zeros((C, K, K))
    for ki in range(K):
        for kj in range(K):
            dw[:, ki, kj] = np.einsum("nchw,nchw->c", dy, xp[:, :, ki:ki + H, kj:kj + W])
            dxp[:, :, ki:ki + H, kj:kj + W] += wt[None, :, ki, kj, None, None] * dy
    return np.ascontiguousarray(dxp[:, :, p:p + H, p:p + W]), dw
