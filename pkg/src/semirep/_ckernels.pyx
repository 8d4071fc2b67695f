# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel-weighted sums over a sorted covariate.

Same contract as ``_pykernels``; observation covariates must be sorted
ascending so that the bounded kernel support maps to a contiguous window.
"""
import numpy as np

cdef double SUPPORT = 2.23606797749978969640917366873  # sqrt(5)
cdef double K0 = 0.335410196624968454463033729844      # 3 / (4 sqrt(5))


cdef inline double _epan(double u) noexcept nogil:
    if u <= -SUPPORT or u >= SUPPORT:
        return 0.0
    return K0 * (1.0 - u * u / 5.0)


cdef inline Py_ssize_t _first_ge(const double[:] a, double v) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = a.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _first_gt(const double[:] a, double v) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = a.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


def local_moments(const double[:] zs, const double[:, :] ys, const double[:] ze,
                  const double[:] hs):
    cdef Py_ssize_t E = ze.shape[0], k = ys.shape[1]
    s = np.zeros((E, 3))
    t = np.zeros((E, 2, k))
    cdef double[:, :] sv = s
    cdef double[:, :, :] tv = t
    cdef Py_ssize_t e, i, c, lo, hi
    cdef double h, z0, d, w, wd
    with nogil:
        for e in range(E):
            h = hs[e]
            z0 = ze[e]
            lo = _first_ge(zs, z0 - SUPPORT * h)
            hi = _first_gt(zs, z0 + SUPPORT * h)
            for i in range(lo, hi):
                d = zs[i] - z0
                w = _epan(d / h) / h
                if w == 0.0:
                    continue
                wd = w * d
                sv[e, 0] += w
                sv[e, 1] += wd
                sv[e, 2] += wd * d
                for c in range(k):
                    tv[e, 0, c] += w * ys[i, c]
                    tv[e, 1, c] += wd * ys[i, c]
    return s, t


def kernel_sums(const double[:] zs, const double[:, :] vals, const double[:] ze, double h):
    cdef Py_ssize_t E = ze.shape[0], k = vals.shape[1]
    out = np.zeros((E, k))
    cdef double[:, :] ov = out
    cdef Py_ssize_t e, i, c, lo, hi
    cdef double z0, w
    with nogil:
        for e in range(E):
            z0 = ze[e]
            lo = _first_ge(zs, z0 - SUPPORT * h)
            hi = _first_gt(zs, z0 + SUPPORT * h)
            for i in range(lo, hi):
                w = _epan((zs[i] - z0) / h) / h
                if w == 0.0:
                    continue
                for c in range(k):
                    ov[e, c] += w * vals[i, c]
    return out
