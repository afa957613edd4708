# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels; mirrors the interface of kernels._ref exactly."""

import numpy as np

cimport cython
from libc.math cimport ceil, sqrt

ctypedef fused real:
    float
    double

BACKEND = "cython"


def trilinear(real[::1] data, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
              real[:, ::1] pts):
    cdef Py_ssize_t n = pts.shape[0]
    dtype = np.float32 if real is float else np.float64
    vals_np = np.empty(n, dtype=dtype)
    grads_np = np.empty((n, 3), dtype=dtype)
    cdef real[::1] vals = vals_np
    cdef real[:, ::1] grads = grads_np
    cdef Py_ssize_t p, i, j, k
    cdef real x, y, z, fx, fy, fz
    cdef real c000, c100, c010, c110, c001, c101, c011, c111
    cdef real a00, a10, a01, a11, b0, b1
    cdef real d00, d10, d01, d11
    cdef bint inx, iny, inz
    cdef Py_ssize_t sy = nx, sz = nx * ny

    for p in range(n):
        x = pts[p, 0]; y = pts[p, 1]; z = pts[p, 2]
        inx = 0.0 <= x <= nx - 1.0
        iny = 0.0 <= y <= ny - 1.0
        inz = 0.0 <= z <= nz - 1.0
        if x < 0.0: x = 0.0
        if x > nx - 1.0: x = nx - 1.0
        if y < 0.0: y = 0.0
        if y > ny - 1.0: y = ny - 1.0
        if z < 0.0: z = 0.0
        if z > nz - 1.0: z = nz - 1.0
        i = <Py_ssize_t>ceil(x) - 1
        j = <Py_ssize_t>ceil(y) - 1
        k = <Py_ssize_t>ceil(z) - 1
        if i < 0: i = 0
        if i > nx - 2: i = nx - 2
        if j < 0: j = 0
        if j > ny - 2: j = ny - 2
        if k < 0: k = 0
        if k > nz - 2: k = nz - 2
        fx = x - i; fy = y - j; fz = z - k

        c000 = data[i + sy * j + sz * k]
        c100 = data[i + 1 + sy * j + sz * k]
        c010 = data[i + sy * (j + 1) + sz * k]
        c110 = data[i + 1 + sy * (j + 1) + sz * k]
        c001 = data[i + sy * j + sz * (k + 1)]
        c101 = data[i + 1 + sy * j + sz * (k + 1)]
        c011 = data[i + sy * (j + 1) + sz * (k + 1)]
        c111 = data[i + 1 + sy * (j + 1) + sz * (k + 1)]

        a00 = c000 + fx * (c100 - c000)
        a10 = c010 + fx * (c110 - c010)
        a01 = c001 + fx * (c101 - c001)
        a11 = c011 + fx * (c111 - c011)
        b0 = a00 + fy * (a10 - a00)
        b1 = a01 + fy * (a11 - a01)
        vals[p] = b0 + fz * (b1 - b0)

        d00 = c100 - c000
        d10 = c110 - c010
        d01 = c101 - c001
        d11 = c111 - c011
        grads[p, 0] = ((d00 + fy * (d10 - d00)) * (1 - fz)
                       + (d01 + fy * (d11 - d01)) * fz) if inx else 0.0
        grads[p, 1] = ((a10 - a00) * (1 - fz) + (a11 - a01) * fz) if iny else 0.0
        grads[p, 2] = (b1 - b0) if inz else 0.0

    return vals_np, grads_np


def adam_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = <real>mi
        v[i] = <real>vi
        p[i] = <real>(p[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps))
