# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Must stay bit-compatible with ``_pykernels.py``."""

import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport log, sqrt, fabs, INFINITY
from numpy.random cimport bitgen_t

cnp.import_array()

DEF CHUNK = 1024


cdef struct UniformStream:
    bitgen_t *bg
    double buf[CHUNK]
    int pos


cdef inline void _refill(UniformStream *s) noexcept nogil:
    cdef int i
    for i in range(CHUNK):
        s.buf[i] = s.bg.next_double(s.bg.state)
    s.pos = 0


cdef inline double _next(UniformStream *s) noexcept nogil:
    if s.pos == CHUNK:
        _refill(s)
    s.pos += 1
    return s.buf[s.pos - 1]


cdef inline double _normal(UniformStream *s) noexcept nogil:
    cdef double u1, u2, r
    while True:
        u1 = 2.0 * _next(s) - 1.0
        u2 = 2.0 * _next(s) - 1.0
        r = u1 * u1 + u2 * u2
        if 0.0 < r < 1.0:
            return u1 * sqrt(-2.0 * log(r) / r)


cdef double _log_gamma_ge1(double a, UniformStream *s) noexcept nogil:
    cdef double d = a - 1.0 / 3.0
    cdef double c = 1.0 / sqrt(9.0 * d)
    cdef double x, v, u
    while True:
        while True:
            x = _normal(s)
            v = 1.0 + c * x
            if v > 0.0:
                break
        v = v * v * v
        u = _next(s)
        if u < 1.0 - 0.0331 * (x * x) * (x * x):
            return log(d) + log(v)
        if log(u) < 0.5 * x * x + d * (1.0 - v + log(v)):
            return log(d) + log(v)


cdef double _log_gamma(double a, UniformStream *s) noexcept nogil:
    cdef double lg, u
    if a == 0.0:
        return -INFINITY
    if a >= 1.0:
        return _log_gamma_ge1(a, s)
    lg = _log_gamma_ge1(a + 1.0, s)
    u = 1.0 - _next(s)
    return lg + log(u) / a


def log_gamma_fill(shapes, rng):
    """Log of independent Gamma(shape, 1) draws, one per entry of ``shapes``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] a = np.ascontiguousarray(shapes, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] av = a
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef UniformStream s
    bitgen = rng.bit_generator
    capsule = bitgen.capsule
    s.bg = <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")
    with bitgen.lock:
        with nogil:
            _refill(&s)
            for i in range(n):
                ov[i] = _log_gamma(av[i], &s)
    return out


def ks_perm_stats(values, labels, long n1, long n2):
    """Two-sample KS statistic for each row of a pooled-label matrix."""
    cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    lab = np.atleast_2d(np.ascontiguousarray(labels, dtype=np.uint8))
    cdef unsigned char[:, ::1] L = lab
    cdef Py_ssize_t P = L.shape[0], n = L.shape[1]
    out = np.empty(P, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t p, i
    cdef long c1, c2
    cdef double d, best
    with nogil:
        for p in range(P):
            c1 = 0
            c2 = 0
            best = 0.0
            for i in range(n):
                if L[p, i]:
                    c2 += 1
                else:
                    c1 += 1
                if i == n - 1 or v[i + 1] != v[i]:
                    d = fabs(<double> c1 / n1 - <double> c2 / n2)
                    if d > best:
                        best = d
            ov[p] = best
    return out
