# cython: language_level=3
"""Compiled inner loops.

Every function here has a numpy twin with the same signature in
``_pykernels``; ``_backend`` decides which one the package uses.
Inputs are expected C-contiguous float64 (the wrappers in ``_backend``
take care of that).
"""
import numpy as np

cimport cython
from libc.math cimport sin, cos, exp, log1p


def rank2_apply(const double[::1] a, const double[::1] b,
                double alpha, double beta, double gamma,
                const double[::1] c1, const double[::1] c2,
                const double[:, ::1] X):
    cdef Py_ssize_t n_rows = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t r, k
    cdef double u, v, p, q, ca, cb
    out = np.empty((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] Y = out
    for r in range(n_rows):
        u = 0.0
        v = 0.0
        for k in range(d):
            u += a[k] * X[r, k]
            v += b[k] * X[r, k]
        # y = x + c1 (a v - b u) + c2 (gamma (a v + b u) - beta a u - alpha b v)
        ca = c1[r] * v + c2[r] * (gamma * v - beta * u)
        cb = -c1[r] * u + c2[r] * (gamma * u - alpha * v)
        for k in range(d):
            Y[r, k] = X[r, k] + ca * a[k] + cb * b[k]
    return out


def plane_rotate(const long[::1] p, const long[::1] q,
                 const double[::1] thetas, const double[::1] positions,
                 const double[:, ::1] X):
    cdef Py_ssize_t n_rows = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t m = thetas.shape[0]
    cdef Py_ssize_t r, i, k, ip, iq
    cdef double ang, c, s, xp, xq
    out = np.empty((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] Y = out
    for r in range(n_rows):
        for k in range(d):
            Y[r, k] = X[r, k]
        for i in range(m):
            ip = p[i]
            iq = q[i]
            ang = positions[r] * thetas[i]
            c = cos(ang)
            s = sin(ang)
            xp = X[r, ip]
            xq = X[r, iq]
            Y[r, ip] = c * xp - s * xq
            Y[r, iq] = s * xp + c * xq
    return out


cdef inline double _log_sigmoid(double z) nogil:
    if z >= 0.0:
        return -log1p(exp(-z))
    return z - log1p(exp(z))


def exclusive_cumsum(const double[::1] x):
    """Neumaier-compensated exclusive prefix sums, ``out[k] = sum(x[:k])``."""
    cdef Py_ssize_t n = x.shape[0], k
    cdef double acc = 0.0, comp = 0.0, t
    out = np.empty(n + 1, dtype=np.float64)
    cdef double[::1] o = out
    o[0] = 0.0
    for k in range(n):
        t = acc + x[k]
        if abs(acc) >= abs(x[k]):
            comp += (acc - t) + x[k]
        else:
            comp += (x[k] - t) + acc
        acc = t
        o[k + 1] = acc + comp
    return out


def suffix_bias(const double[::1] psi):
    """Row of causal path sums from edge potentials.

    ``psi[l - 1]`` holds the potential of link ``l`` for ``l = 1..t``; the
    result has ``out[j] = sum(psi[j:])`` with ``out[t] = 0``.
    """
    cdef Py_ssize_t t = psi.shape[0], j
    cdef double acc = 0.0, comp = 0.0, s, x
    out = np.empty(t + 1, dtype=np.float64)
    cdef double[::1] o = out
    o[t] = 0.0
    for j in range(t - 1, -1, -1):
        x = psi[j]
        s = acc + x
        if abs(acc) >= abs(x):
            comp += (acc - s) + x
        else:
            comp += (x - s) + acc
        acc = s
        o[j] = acc + comp
    return out


def logsigmoid_path_row(const double[::1] probe, const double[:, ::1] rotated,
                        double alpha, double inv_d):
    """Edge potentials ``alpha * log_sigmoid(<probe, rotated[l]> * inv_d)``
    for ``l = 1..t`` where ``t = rotated.shape[0] - 1``, plus their suffix
    sums."""
    cdef Py_ssize_t t = rotated.shape[0] - 1, d = rotated.shape[1]
    cdef Py_ssize_t l, k
    cdef double dot
    if t < 0:
        t = 0
    psi_arr = np.empty(t, dtype=np.float64)
    cdef double[::1] psi = psi_arr
    for l in range(1, t + 1):
        dot = 0.0
        for k in range(d):
            dot += probe[k] * rotated[l, k]
        psi[l - 1] = alpha * _log_sigmoid(dot * inv_d)
    return psi_arr, suffix_bias(psi_arr)
