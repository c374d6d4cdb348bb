# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_kernels_py``.

Loop order mirrors the numpy reference so results agree exactly.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double

BACKEND = "cython"


def _im2col(const real[:, :, :, ::1] x, real[:, :, :, ::1] out, int kh, int kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = out.shape[1], wo = out.shape[2]
    cdef Py_ssize_t b, i, j, ci, u, v, col
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    col = 0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, i, j, col] = x[b, ci, i + u, j + v]
                                col = col + 1


def im2col(x, int kh, int kw):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, h - kh + 1, w - kw + 1, c * kh * kw), dtype=x.dtype)
    if out.size:
        _im2col(x, out, kh, kw)
    return out


def _col2im(const real[:, :, :, ::1] d, real[:, :, :, ::1] dx, int kh, int kw):
    cdef Py_ssize_t n = dx.shape[0], c = dx.shape[1]
    cdef Py_ssize_t ho = d.shape[1], wo = d.shape[2]
    cdef Py_ssize_t b, i, j, ci, u, v
    with nogil:
        for u in range(kh):
            for v in range(kw):
                for b in range(n):
                    for ci in range(c):
                        for i in range(ho):
                            for j in range(wo):
                                dx[b, ci, i + u, j + v] += d[b, i, j, (ci * kh + u) * kw + v]


def col2im(dcols, int c, int h, int w, int kh, int kw):
    dcols = np.ascontiguousarray(dcols)
    dx = np.zeros((dcols.shape[0], c, h, w), dtype=dcols.dtype)
    if dcols.size:
        _col2im(dcols, dx, kh, kw)
    return dx


def _pool_fwd(const real[:, :, :, ::1] x, real[:, :, :, ::1] y, Py_ssize_t[:, :, :, ::1] arg,
              int ph, int pw, int sh, int sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t b, ci, i, j, u, v, best
    cdef real m, val
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        m = x[b, ci, i * sh, j * sw]
                        best = 0
                        for u in range(ph):
                            for v in range(pw):
                                val = x[b, ci, i * sh + u, j * sw + v]
                                if val > m:
                                    m = val
                                    best = u * pw + v
                        y[b, ci, i, j] = m
                        arg[b, ci, i, j] = best


def maxpool_forward(x, int ph, int pw, int sh, int sw):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h - ph) // sh + 1
    wo = (w - pw) // sw + 1
    y = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.intp)
    if y.size:
        _pool_fwd(x, y, arg, ph, pw, sh, sw)
    return y, arg


def _pool_bwd(const real[:, :, :, ::1] dy, const Py_ssize_t[:, :, :, ::1] arg,
              real[:, :, :, ::1] dx, int ph, int pw, int sh, int sw):
    cdef Py_ssize_t n = dy.shape[0], c = dy.shape[1]
    cdef Py_ssize_t ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t b, ci, i, j, u, v, k
    with nogil:
        for u in range(ph):
            for v in range(pw):
                k = u * pw + v
                for b in range(n):
                    for ci in range(c):
                        for i in range(ho):
                            for j in range(wo):
                                if arg[b, ci, i, j] == k:
                                    dx[b, ci, i * sh + u, j * sw + v] += dy[b, ci, i, j]


def maxpool_backward(dy, arg, int h, int w, int ph, int pw, int sh, int sw):
    dy = np.ascontiguousarray(dy)
    arg = np.ascontiguousarray(arg, dtype=np.intp)
    dx = np.zeros((dy.shape[0], dy.shape[1], h, w), dtype=dy.dtype)
    if dy.size:
        _pool_bwd(dy, arg, dx, ph, pw, sh, sw)
    return dx
