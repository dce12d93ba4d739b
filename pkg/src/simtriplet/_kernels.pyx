# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels.

Same layout contract as the numpy fallback in ``_kernels_py``: rows ordered
(b, oh, ow), columns ordered (c, ki, kj). Accumulation order in col2im is
fixed (kernel offsets in row-major order) so results are deterministic.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t ncol = c * kh * kw
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((b * oh * ow, ncol), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t n, ci, ki, kj, oy, ox, iy, ix, row, col
    with nogil:
        for n in range(b):
            for oy in range(oh):
                for ox in range(ow):
                    row = (n * oh + oy) * ow + ox
                    col = 0
                    for ci in range(c):
                        for ki in range(kh):
                            iy = oy * stride + ki - pad
                            for kj in range(kw):
                                ix = ox * stride + kj - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[row, col] = x[n, ci, iy, ix]
                                else:
                                    out[row, col] = 0
                                col += 1
    return out_arr


def col2im(floating[:, ::1] cols, tuple shape, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ci, ki, kj, oy, ox, iy, ix, row, col
    with nogil:
        for n in range(b):
            for oy in range(oh):
                for ox in range(ow):
                    row = (n * oh + oy) * ow + ox
                    col = 0
                    for ci in range(c):
                        for ki in range(kh):
                            iy = oy * stride + ki - pad
                            for kj in range(kw):
                                ix = ox * stride + kj - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[n, ci, iy, ix] += cols[row, col]
                                col += 1
    return out_arr
