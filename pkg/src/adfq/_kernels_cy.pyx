# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``adfq._kernels_py``.

Fuses the quantize->dequantize inner loops into single passes.  Every
expression mirrors the numpy fallback operation-for-operation (same
division, ``rint`` rounding, clamp and multiply order) so both backends
are bit-identical; the build disables FP contraction for the same reason.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, rint

cnp.import_array()


def uniform_fakequant(cnp.ndarray x_arr, scale, zero, long hi, axis):
    cdef cnp.ndarray[double, ndim=2] x2
    cdef cnp.ndarray[double, ndim=1] x1, y1
    cdef cnp.ndarray[double, ndim=2] y2
    cdef cnp.ndarray[long, ndim=1] c1
    cdef cnp.ndarray[long, ndim=2] c2
    cdef cnp.ndarray[double, ndim=1] sv, zv
    cdef double s, z, t, h = <double> hi
    cdef Py_ssize_t i, j, m, n

    if x_arr.ndim == 1:
        x1 = np.ascontiguousarray(x_arr)
        n = x1.shape[0]
        y1 = np.empty(n)
        c1 = np.empty(n, dtype=np.int64)
        s = float(scale)
        z = float(zero)
        for i in range(n):
            t = rint(x1[i] / s) + z
            if t < 0.0:
                t = 0.0
            elif t > h:
                t = h
            y1[i] = s * (t - z)
            c1[i] = <long> t
        return y1, c1

    x2 = np.ascontiguousarray(x_arr)
    m = x2.shape[0]
    n = x2.shape[1]
    y2 = np.empty((m, n))
    c2 = np.empty((m, n), dtype=np.int64)
    if axis is None:
        s = float(scale)
        z = float(zero)
        for i in range(m):
            for j in range(n):
                t = rint(x2[i, j] / s) + z
                if t < 0.0:
                    t = 0.0
                elif t > h:
                    t = h
                y2[i, j] = s * (t - z)
                c2[i, j] = <long> t
    elif axis == 0:
        sv = np.ascontiguousarray(scale, dtype=np.float64)
        zv = np.ascontiguousarray(zero, dtype=np.float64)
        for i in range(m):
            s = sv[i]
            z = zv[i]
            for j in range(n):
                t = rint(x2[i, j] / s) + z
                if t < 0.0:
                    t = 0.0
                elif t > h:
                    t = h
                y2[i, j] = s * (t - z)
                c2[i, j] = <long> t
    else:
        sv = np.ascontiguousarray(scale, dtype=np.float64)
        zv = np.ascontiguousarray(zero, dtype=np.float64)
        for i in range(m):
            for j in range(n):
                s = sv[j]
                z = zv[j]
                t = rint(x2[i, j] / s) + z
                if t < 0.0:
                    t = 0.0
                elif t > h:
                    t = h
                y2[i, j] = s * (t - z)
                c2[i, j] = <long> t
    return y2, c2


def outlier_split(cnp.ndarray x_arr, double alpha, bint one_sided):
    cdef cnp.ndarray[double, ndim=2] x = np.ascontiguousarray(x_arr)
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j, cnt = 0
    cdef double v
    cdef cnp.ndarray[double, ndim=2] dense = np.empty((m, n))
    cdef cnp.ndarray[long, ndim=1] rows, cols
    cdef cnp.ndarray[double, ndim=1] vals

    for i in range(m):
        for j in range(n):
            v = x[i, j]
            if (v >= alpha) if one_sided else (fabs(v) >= alpha):
                cnt += 1
    rows = np.empty(cnt, dtype=np.int64)
    cols = np.empty(cnt, dtype=np.int64)
    vals = np.empty(cnt)
    cnt = 0
    for i in range(m):
        for j in range(n):
            v = x[i, j]
            if (v >= alpha) if one_sided else (fabs(v) >= alpha):
                rows[cnt] = i
                cols[cnt] = j
                vals[cnt] = v
                dense[i, j] = 0.0
                cnt += 1
            else:
                dense[i, j] = v
    return dense, rows, cols, vals


def spmm(cnp.ndarray rows_arr, cnp.ndarray cols_arr, cnp.ndarray vals_arr,
         long n_rows, cnp.ndarray b_arr):
    cdef cnp.ndarray[long, ndim=1] rows = np.ascontiguousarray(rows_arr)
    cdef cnp.ndarray[long, ndim=1] cols = np.ascontiguousarray(cols_arr)
    cdef cnp.ndarray[double, ndim=1] vals = np.ascontiguousarray(vals_arr)
    cdef cnp.ndarray[double, ndim=2] b = np.ascontiguousarray(b_arr)
    cdef Py_ssize_t p = b.shape[1], nnz = vals.shape[0], i, j, r, k
    cdef double v
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((n_rows, p))

    for i in range(nnz):
        r = rows[i]
        k = cols[i]
        v = vals[i]
        for j in range(p):
            out[r, j] += v * b[k, j]
    return out
