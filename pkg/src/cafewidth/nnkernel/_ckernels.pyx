# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im and depthwise convolution kernels (float64, same padding, stride 1)."""

import numpy as np


def im2col(const double[:, :, :, ::1] x, int K):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t p = K // 2
    # every entry is written below, so skip the zero fill
    cols_arr = np.empty((N * H * W, C * K * K), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, h, w, ki, kj, hh, ww, row, col
    with nogil:
        for n in range(N):
            for h in range(H):
                for w in range(W):
                    row = (n * H + h) * W + w
                    col = 0
                    for c in range(C):
                        for ki in range(K):
                            hh = h + ki - p
                            if hh < 0 or hh >= H:
                                for kj in range(K):
                                    cols[row, col + kj] = 0.0
                                col += K
                                continue
                            for kj in range(K):
                                ww = w + kj - p
                                if 0 <= ww < W:
                                    cols[row, col] = x[n, c, hh, ww]
                                else:
                                    cols[row, col] = 0.0
                                col += 1
    return cols_arr


def col2im(const double[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W, int K):
    cdef Py_ssize_t p = K // 2
    dx_arr = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, h, w, ki, kj, hh, ww, row, col
    with nogil:
        for n in range(N):
            for h in range(H):
                for w in range(W):
                    row = (n * H + h) * W + w
                    col = 0
                    for c in range(C):
                        for ki in range(K):
                            hh = h + ki - p
                            for kj in range(K):
                                ww = w + kj - p
                                if 0 <= hh < H and 0 <= ww < W:
                                    dx[n, c, hh, ww] += cols[row, col]
                                col += 1
    return dx_arr


def dw_forward(const double[:, :, :, ::1] x, const double[:, :, ::1] wt):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K = wt.shape[1], p = K // 2
    y_arr = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n, c, h, w, ki, kj, hh, ww
    cdef double acc
    with nogil:
        for n in range(N):
            for c in range(C):
                for h in range(H):
                    for w in range(W):
                        acc = 0.0
                        for ki in range(K):
                            hh = h + ki - p
                            if hh < 0 or hh >= H:
                                continue
                            for kj in range(K):
                                ww = w + kj - p
                                if 0 <= ww < W:
                                    acc = acc + wt[c, ki, kj] * x[n, c, hh, ww]
                        y[n, c, h, w] = acc
    return y_arr


def dw_backward(const double[:, :, :, ::1] x, const double[:, :, ::1] wt, const double[:, :, :, ::1] dy):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K = wt.shape[1], p = K // 2
    dx_arr = np.zeros((N, C, H, W), dtype=np.float64)
    dw_arr = np.zeros((C, K, K), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, ::1] dw = dw_arr
    cdef Py_ssize_t n, c, h, w, ki, kj, hh, ww
    cdef double g
    with nogil:
        for n in range(N):
            for c in range(C):
                for h in range(H):
                    for w in range(W):
                        g = dy[n, c, h, w]
                        for ki in range(K):
                            hh = h + ki - p
                            if hh < 0 or hh >= H:
                                continue
                            for kj in range(K):
                                ww = w + kj - p
                                if 0 <= ww < W:
                                    dw[c, ki, kj] += g * x[n, c, hh, ww]
                                    dx[n, c, hh, ww] += g * wt[c, ki, kj]
    return dx_arr, dw_arr
