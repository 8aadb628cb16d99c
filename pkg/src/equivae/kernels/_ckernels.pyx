# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution gather/scatter kernels.

Loop order in ``col2im`` matches the numpy fallback so both backends agree
bit for bit.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x_pad, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t B = x_pad.shape[0]
    cdef Py_ssize_t C = x_pad.shape[1]
    cdef Py_ssize_t kk = k * k
    cols_arr = np.empty((B * out_h * out_w, C * kk), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, oh, ow, c, i, j, row, y0, x0, base
    with nogil:
        row = 0
        for b in range(B):
            for oh in range(out_h):
                y0 = oh * stride
                for ow in range(out_w):
                    x0 = ow * stride
                    for c in range(C):
                        base = c * kk
                        for i in range(k):
                            for j in range(k):
                                cols[row, base + i * k + j] = x_pad[b, c, y0 + i, x0 + j]
                    row += 1
    return cols_arr


def col2im(const double[:, ::1] cols, tuple shape, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t B = shape[0]
    cdef Py_ssize_t C = shape[1]
    cdef Py_ssize_t Hp = shape[2]
    cdef Py_ssize_t Wp = shape[3]
    cdef Py_ssize_t kk = k * k
    out_arr = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oh, ow, c, i, j, row, col
    with nogil:
        for i in range(k):
            for j in range(k):
                for b in range(B):
                    for c in range(C):
                        col = c * kk + i * k + j
                        for oh in range(out_h):
                            row = (b * out_h + oh) * out_w
                            for ow in range(out_w):
                                out[b, c, oh * stride + i, ow * stride + j] += cols[row + ow, col]
    return out_arr
