# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution and max-pooling kernels (same contract as _kernels_py).

Convolution gathers the 3x3x3xC_in patch of one output voxel into a small
buffer and updates all output channels with contiguous axpy loops, so the
working set stays in L1 and the inner loops vectorize without reassociation.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memset

cnp.import_array()

BACKEND = "cython"


cdef inline void _gather(double[:, :, :, :, ::1] xp, Py_ssize_t i, Py_ssize_t cin,
                         Py_ssize_t z, Py_ssize_t y, Py_ssize_t x, double* patch) noexcept nogil:
    cdef Py_ssize_t ci, a, b, c, j = 0
    for ci in range(cin):
        for a in range(3):
            for b in range(3):
                for c in range(3):
                    patch[j] = xp[i, ci, z + a, y + b, x + c]
                    j += 1


def conv3d_forward(double[:, :, :, :, ::1] x, double[:, :, :, :, ::1] w, double[::1] b):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t cout = w.shape[0], kk = cin * 27
    cdef double[:, :, :, :, ::1] xp = np.pad(
        np.asarray(x), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cdef double[:, ::1] wt = np.ascontiguousarray(np.asarray(w).reshape(cout, kk).T)
    cdef double[::1] patch = np.empty(kk)
    cdef double[::1] acc = np.empty(cout)
    out_arr = np.empty((n, cout, d, h, wd))
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, co, j, z, y, xx
    cdef double pv
    with nogil:
        for i in range(n):
            for z in range(d):
                for y in range(h):
                    for xx in range(wd):
                        _gather(xp, i, cin, z, y, xx, &patch[0])
                        for co in range(cout):
                            acc[co] = b[co]
                        for j in range(kk):
                            pv = patch[j]
                            if pv != 0.0:
                                for co in range(cout):
                                    acc[co] += pv * wt[j, co]
                        for co in range(cout):
                            out[i, co, z, y, xx] = acc[co]
    return out_arr


def conv3d_backward(double[:, :, :, :, ::1] x, double[:, :, :, :, ::1] w,
                    double[:, :, :, :, ::1] gout, bint need_dx=True):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t cout = w.shape[0], kk = cin * 27
    cdef double[:, :, :, :, ::1] xp = np.pad(
        np.asarray(x), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cdef double[:, ::1] wm = np.ascontiguousarray(np.asarray(w).reshape(cout, kk))
    gwt_arr = np.zeros((kk, cout))
    cdef double[:, ::1] gwt = gwt_arr
    gb_arr = np.zeros(cout)
    cdef double[::1] gb = gb_arr
    gxp_arr = np.zeros((n, cin, d + 2, h + 2, wd + 2)) if need_dx else np.zeros((1, 1, 1, 1, 1))
    cdef double[:, :, :, :, ::1] gxp = gxp_arr
    cdef double[::1] patch = np.empty(kk)
    cdef double[::1] gpatch = np.empty(kk)
    cdef double[::1] gvox = np.empty(cout)
    cdef Py_ssize_t i, co, j, z, y, xx, ci, a, bb, c
    cdef double pv, gv
    with nogil:
        for i in range(n):
            for z in range(d):
                for y in range(h):
                    for xx in range(wd):
                        for co in range(cout):
                            gvox[co] = gout[i, co, z, y, xx]
                            gb[co] += gvox[co]
                        _gather(xp, i, cin, z, y, xx, &patch[0])
                        for j in range(kk):
                            pv = patch[j]
                            if pv != 0.0:
                                for co in range(cout):
                                    gwt[j, co] += pv * gvox[co]
                        if need_dx:
                            memset(&gpatch[0], 0, kk * sizeof(double))
                            for co in range(cout):
                                gv = gvox[co]
                                if gv != 0.0:
                                    for j in range(kk):
                                        gpatch[j] += gv * wm[co, j]
                            j = 0
                            for ci in range(cin):
                                for a in range(3):
                                    for bb in range(3):
                                        for c in range(3):
                                            gxp[i, ci, z + a, y + bb, xx + c] += gpatch[j]
                                            j += 1
    gw = np.ascontiguousarray(gwt_arr.T).reshape(np.asarray(w).shape)
    if not need_dx:
        return None, gw, gb_arr
    return gxp_arr[:, :, 1:-1, 1:-1, 1:-1].copy(), gw, gb_arr


def maxpool3d_forward(double[:, :, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t d = x.shape[2] // 2, h = x.shape[3] // 2, wd = x.shape[4] // 2
    out_arr = np.empty((n, c, d, h, wd))
    arg_arr = np.empty((n, c, d, h, wd), dtype=np.int8)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t i, ch, z, y, xx, a, bb, cc
    cdef double best, v
    cdef cnp.int8_t k, kbest
    with nogil:
        for i in range(n):
            for ch in range(c):
                for z in range(d):
                    for y in range(h):
                        for xx in range(wd):
                            best = x[i, ch, 2 * z, 2 * y, 2 * xx]
                            kbest = 0
                            k = 0
                            for a in range(2):
                                for bb in range(2):
                                    for cc in range(2):
                                        v = x[i, ch, 2 * z + a, 2 * y + bb, 2 * xx + cc]
                                        if v > best:
                                            best = v
                                            kbest = k
                                        k += 1
                            out[i, ch, z, y, xx] = best
                            arg[i, ch, z, y, xx] = kbest
    return out_arr, arg_arr


def maxpool3d_backward(double[:, :, :, :, ::1] gout, cnp.int8_t[:, :, :, :, ::1] arg, shape):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1]
    cdef Py_ssize_t d = gout.shape[2], h = gout.shape[3], wd = gout.shape[4]
    g_arr = np.zeros(tuple(shape))
    cdef double[:, :, :, :, ::1] g = g_arr
    cdef Py_ssize_t i, ch, z, y, xx
    cdef int k
    with nogil:
        for i in range(n):
            for ch in range(c):
                for z in range(d):
                    for y in range(h):
                        for xx in range(wd):
                            k = arg[i, ch, z, y, xx]
                            g[i, ch, 2 * z + k // 4, 2 * y + (k // 2) % 2, 2 * xx + k % 2] = gout[i, ch, z, y, xx]
    return g_arr
