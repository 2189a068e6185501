# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``; identical signatures."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, Py_ssize_t k):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t h = xp.shape[2] - k + 1, w = xp.shape[3] - k + 1
    out_arr = np.empty((n, h, w, c * k * k))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j, col
    for b in range(n):
        for y in range(h):
            for x in range(w):
                col = 0
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            out[b, y, x, col] = xp[b, ch, y + i, x + j]
                            col += 1
    return out_arr


def col2im(double[:, :, :, ::1] cols, Py_ssize_t c, Py_ssize_t k, Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t n = cols.shape[0], h = cols.shape[1], w = cols.shape[2]
    out_arr = np.zeros((n, c, hp, wp))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j, col
    for b in range(n):
        for y in range(h):
            for x in range(w):
                col = 0
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            out[b, ch, y + i, x + j] += cols[b, y, x, col]
                            col += 1
    return out_arr


def blur_separable(double[:, :, ::1] xp, double[::1] kern):
    cdef Py_ssize_t k = kern.shape[0], c = xp.shape[0]
    cdef Py_ssize_t hp = xp.shape[1], wp = xp.shape[2]
    cdef Py_ssize_t h = hp - k + 1, w = wp - k + 1
    tmp_arr = np.zeros((c, hp, w))
    out_arr = np.zeros((c, h, w))
    cdef double[:, :, ::1] tmp = tmp_arr
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t ch, y, x, j
    cdef double acc
    for ch in range(c):
        for y in range(hp):
            for x in range(w):
                acc = 0.0
                for j in range(k):
                    acc = acc + kern[j] * xp[ch, y, x + j]
                tmp[ch, y, x] = acc
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for j in range(k):
                    acc = acc + kern[j] * tmp[ch, y + j, x]
                out[ch, y, x] = acc
    return out_arr
