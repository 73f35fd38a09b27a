# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused elementwise kernels for the differentiation engine hot path.

Each kernel computes a value together with the derivative orders the tape
needs, in a single pass over contiguous double buffers.
"""

from libc.math cimport tanh as ctanh, exp as cexp, erf as cerf, sqrt as csqrt

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def tanh_pair(const double[::1] v, double[::1] fv, double[::1] fp):
    """tanh value and first derivative 1 - tanh^2."""
    cdef Py_ssize_t i, n = v.shape[0]
    cdef double t
    for i in range(n):
        t = ctanh(v[i])
        fv[i] = t
        fp[i] = 1.0 - t * t


def tanh_quad(const double[::1] v, double[::1] fv, double[::1] fp,
              double[::1] fpp, double[::1] fppp):
    """tanh value and its first three derivatives."""
    cdef Py_ssize_t i, n = v.shape[0]
    cdef double t, p
    for i in range(n):
        t = ctanh(v[i])
        p = 1.0 - t * t
        fv[i] = t
        fp[i] = p
        fpp[i] = -2.0 * t * p
        fppp[i] = 2.0 * p * (3.0 * t * t - 1.0)


def gelu_pair(const double[::1] v, double[::1] fv, double[::1] fp):
    """Exact gelu x * Phi(x) and its derivative Phi(x) + x phi(x)."""
    cdef Py_ssize_t i, n = v.shape[0]
    cdef double x, cdf, pdf
    for i in range(n):
        x = v[i]
        cdf = 0.5 * (1.0 + cerf(INV_SQRT2 * x))
        pdf = INV_SQRT2PI * cexp(-0.5 * x * x)
        fv[i] = x * cdf
        fp[i] = cdf + x * pdf
