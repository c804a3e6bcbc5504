# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.

Every routine here has a numpy twin in ``_fallback.py`` that performs the
same floating point operations in the same order, so both backends return
bit-identical arrays (the build disables FMA contraction for this reason).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def scatter_add_rows(double[:, ::1] values, cnp.int64_t[::1] index, Py_ssize_t n_out):
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t width = values.shape[1]
    out_arr = np.zeros((n_out, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t e, f, k
    for e in range(n_rows):
        k = index[e]
        if k < 0 or k >= n_out:
            raise IndexError("scatter index out of range")
        for f in range(width):
            out[k, f] += values[e, f]
    return out_arr


cdef void _accel(double[:, ::1] x, double[:, ::1] coupling, double soft2,
                 double[:, ::1] acc) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, r2, w
    for i in range(n):
        acc[i, 0] = 0.0
        acc[i, 1] = 0.0
        acc[i, 2] = 0.0
    for j in range(n):
        for i in range(n):
            if i == j:
                continue
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            r2 = dx * dx + dy * dy + dz * dz + soft2
            w = coupling[i, j] * (1.0 / (r2 * sqrt(r2)))
            acc[i, 0] = acc[i, 0] + w * dx
            acc[i, 1] = acc[i, 1] + w * dy
            acc[i, 2] = acc[i, 2] + w * dz


def leapfrog(double[:, :, ::1] pos, double[:, :, ::1] vel, double[:, :, ::1] coupling,
             double dt, double soft2, Py_ssize_t n_steps, Py_ssize_t record_every):
    cdef Py_ssize_t n_sys = pos.shape[0]
    cdef Py_ssize_t n = pos.shape[1]
    cdef Py_ssize_t n_rec = n_steps // record_every + 1
    xs_arr = np.empty((n_sys, n_rec, n, 3), dtype=np.float64)
    vs_arr = np.empty((n_sys, n_rec, n, 3), dtype=np.float64)
    cdef double[:, :, :, ::1] xs = xs_arr
    cdef double[:, :, :, ::1] vs = vs_arr
    x_arr = np.empty((n, 3), dtype=np.float64)
    v_arr = np.empty((n, 3), dtype=np.float64)
    a_arr = np.empty((n, 3), dtype=np.float64)
    cdef double[:, ::1] x = x_arr
    cdef double[:, ::1] v = v_arr
    cdef double[:, ::1] a = a_arr
    cdef double half = 0.5 * dt
    cdef Py_ssize_t b, s, i, d, r
    with nogil:
        for b in range(n_sys):
            for i in range(n):
                for d in range(3):
                    x[i, d] = pos[b, i, d]
                    v[i, d] = vel[b, i, d]
                    xs[b, 0, i, d] = x[i, d]
                    vs[b, 0, i, d] = v[i, d]
            _accel(x, coupling[b], soft2, a)
            r = 1
            for s in range(1, n_steps + 1):
                for i in range(n):
                    for d in range(3):
                        v[i, d] = v[i, d] + half * a[i, d]
                for i in range(n):
                    for d in range(3):
                        x[i, d] = x[i, d] + dt * v[i, d]
                _accel(x, coupling[b], soft2, a)
                for i in range(n):
                    for d in range(3):
                        v[i, d] = v[i, d] + half * a[i, d]
                if s % record_every == 0:
                    for i in range(n):
                        for d in range(3):
                            xs[b, r, i, d] = x[i, d]
                            vs[b, r, i, d] = v[i, d]
                    r += 1
    return xs_arr, vs_arr

