# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_reference.py`` for the numpy twins."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, cos, sin, tanh, fabs, copysign, isinf
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t key, uint64_t ctr) nogil:
    cdef uint64_t z = key + (ctr + 1) * GOLDEN
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline double _unif(uint64_t key, uint64_t ctr) nogil:
    return (<double>(_mix(key, ctr) >> 11) + 0.5) * INV_2_53


def splitmix64(key, start, Py_ssize_t n):
    cdef uint64_t k = <uint64_t>key, s = <uint64_t>start
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = _mix(k, s + <uint64_t>i)
    return out


def counter_uniform(key, start, Py_ssize_t n):
    cdef uint64_t k = <uint64_t>key, s = <uint64_t>start
    out = np.empty(n)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = _unif(k, s + <uint64_t>i)
    return out


def counter_normal(key, start, Py_ssize_t n):
    cdef uint64_t k = <uint64_t>key, s = <uint64_t>start
    cdef Py_ssize_t pairs = (n + 1) // 2
    out = np.empty(2 * pairs)
    cdef double[::1] o = out
    cdef Py_ssize_t j
    cdef double r, th
    for j in range(pairs):
        r = sqrt(-2.0 * log(_unif(k, s + <uint64_t>(2 * j))))
        th = TWO_PI * _unif(k, s + <uint64_t>(2 * j + 1))
        o[2 * j] = r * cos(th)
        o[2 * j + 1] = r * sin(th)
    return out[:n]


cdef inline double _fwd(double x, double M, int kind, double band) nogil:
    cdef double a, ax, s
    if isinf(M):
        return x
    if kind == 0:
        return M * tanh(x / M)
    if kind == 1 or kind == 3 or band <= 0.0:
        if x > M:
            return M
        if x < -M:
            return -M
        return x
    a = M - band
    ax = fabs(x)
    if ax <= a:
        return x
    if ax >= M + band:
        return copysign(M, x)
    s = (ax - a) / (2.0 * band)
    return copysign(a + band * s * (2.0 - s), x)


cdef inline double _der(double x, double M, int kind, double band) nogil:
    cdef double a, ax, t
    if isinf(M) or kind == 3:
        return 1.0
    if kind == 0:
        t = tanh(x / M)
        return 1.0 - t * t
    if kind == 1 or band <= 0.0:
        return 1.0 if fabs(x) < M else 0.0
    a = M - band
    ax = fabs(x)
    if ax <= a:
        return 1.0
    if ax >= M + band:
        return 0.0
    return 1.0 - (ax - a) / (2.0 * band)


def bound_forward(x, double M, int kind, double band):
    if kind < 0 or kind > 3:
        raise ValueError(f"unknown bound kind {kind}")
    if isinf(M):
        return np.array(x, dtype=np.float64)
    # numpy's vectorized tanh and clip beat a scalar loop; only the band gains from compiling
    if kind == 0:
        return M * np.tanh(np.asarray(x, dtype=np.float64) / M)
    if kind != 2 or band <= 0.0:
        return np.minimum(M, np.maximum(-M, np.asarray(x, dtype=np.float64)))
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] xi = arr.reshape(-1)
    cdef double[::1] o = out.reshape(-1)
    cdef Py_ssize_t i
    for i in range(xi.shape[0]):
        o[i] = _fwd(xi[i], M, kind, band)
    return out


def bound_derivative(x, double M, int kind, double band):
    if kind < 0 or kind > 3:
        raise ValueError(f"unknown bound kind {kind}")
    if kind == 0 and not isinf(M):
        th = np.tanh(np.asarray(x, dtype=np.float64) / M)
        return 1.0 - th * th
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] xi = arr.reshape(-1)
    cdef double[::1] o = out.reshape(-1)
    cdef Py_ssize_t i
    for i in range(xi.shape[0]):
        o[i] = _der(xi[i], M, kind, band)
    return out


def layer_norm_forward(x, double eps):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = arr
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j
    y = np.empty((n, d))
    rstd = np.empty(n)
    cdef double[:, ::1] yv = y
    cdef double[::1] rv = rstd
    cdef double mu, var, c, r
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += xv[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = xv[i, j] - mu
            var += c * c
        r = 1.0 / sqrt(var / d + eps)
        rv[i] = r
        for j in range(d):
            yv[i, j] = (xv[i, j] - mu) * r
    return y, rstd


def layer_norm_backward(gy, y, rstd):
    g_arr = np.ascontiguousarray(gy, dtype=np.float64)
    y_arr = np.ascontiguousarray(y, dtype=np.float64)
    r_arr = np.ascontiguousarray(rstd, dtype=np.float64)
    cdef double[:, ::1] gv = g_arr
    cdef double[:, ::1] yv = y_arr
    cdef double[::1] rv = r_arr
    cdef Py_ssize_t n = gv.shape[0], d = gv.shape[1], i, j
    gx = np.empty((n, d))
    cdef double[:, ::1] ov = gx
    cdef double mg, mgy
    for i in range(n):
        mg = 0.0
        mgy = 0.0
        for j in range(d):
            mg += gv[i, j]
            mgy += gv[i, j] * yv[i, j]
        mg /= d
        mgy /= d
        for j in range(d):
            ov[i, j] = rv[i] * (gv[i, j] - mg - yv[i, j] * mgy)
    return gx


def clip_accumulate(G, double C):
    arr = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[:, ::1] gv = arr
    cdef Py_ssize_t B = gv.shape[0], P = gv.shape[1], b, p
    total = np.zeros(P)
    comp = np.zeros(P)
    norms = np.empty(B)
    eta = np.empty(B)
    cdef double[::1] tv = total
    cdef double[::1] cv = comp
    cdef double[::1] nv = norms
    cdef double[::1] ev = eta
    cdef double s, e, v, t
    for b in range(B):
        s = 0.0
        for p in range(P):
            s += gv[b, p] * gv[b, p]
        s = sqrt(s)
        nv[b] = s
        e = 1.0
        if not isinf(C) and s > C:
            e = C / s
        ev[b] = e
        for p in range(P):
            v = gv[b, p] * e if e != 1.0 else gv[b, p]
            t = tv[p] + v
            if fabs(tv[p]) >= fabs(v):
                cv[p] += (tv[p] - t) + v
            else:
                cv[p] += (v - t) + tv[p]
            tv[p] = t
    for p in range(P):
        tv[p] += cv[p]
    return total, norms, eta
