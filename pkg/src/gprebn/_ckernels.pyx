# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled BN kernels.

Same contracts as ``gprebn._pykernels``. Column reductions run row by row in
index order, which is also the order numpy uses for axis-0 reductions of a
C-contiguous array, so both backends agree to the last bit on reductions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def batch_mean_var(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    mu_arr = np.zeros(d, dtype=np.float64)
    var_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] mu = mu_arr
    cdef double[::1] var = var_arr
    cdef double diff
    with nogil:
        for i in range(n):
            for j in range(d):
                mu[j] += x[i, j]
        for j in range(d):
            mu[j] = mu[j] / n
        for i in range(n):
            for j in range(d):
                diff = x[i, j] - mu[j]
                var[j] += diff * diff
        for j in range(d):
            var[j] = var[j] / n
    return mu_arr, var_arr


def normalize_affine(const double[:, ::1] x, const double[::1] mu, const double[::1] var,
                     const double[::1] gamma, const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    std_arr = np.empty(d, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] std = std_arr
    cdef double h
    with nogil:
        for j in range(d):
            std[j] = sqrt(var[j] + eps)
        for i in range(n):
            for j in range(d):
                h = (x[i, j] - mu[j]) / std[j]
                xhat[i, j] = h
                out[i, j] = h * gamma[j] + beta[j]
    return out_arr, xhat_arr


def bn_input_grad(const double[:, ::1] g, const double[:, ::1] xhat, const double[::1] scale,
                  bint preserve):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    gx_arr = np.empty((n, d), dtype=np.float64)
    sg_arr = np.zeros(d, dtype=np.float64)
    sgx_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] sg = sg_arr
    cdef double[::1] sgx = sgx_arr
    cdef double[::1] mg = np.empty(d, dtype=np.float64)
    cdef double[::1] mgx = np.empty(d, dtype=np.float64)
    with nogil:
        for i in range(n):
            for j in range(d):
                sg[j] += g[i, j]
                sgx[j] += g[i, j] * xhat[i, j]
        if preserve:
            for j in range(d):
                mg[j] = sg[j] / n
                mgx[j] = sgx[j] / n
            for i in range(n):
                for j in range(d):
                    gx[i, j] = scale[j] * (g[i, j] - mg[j] - xhat[i, j] * mgx[j])
        else:
            for i in range(n):
                for j in range(d):
                    gx[i, j] = g[i, j] * scale[j]
    return gx_arr, sg_arr, sgx_arr
