# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: counter-based uniforms and exact assignment."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

ctypedef unsigned long long u64

cdef u64 G_PARTICLE = 0x9E3779B97F4A7C15ULL
cdef u64 G_STEP = 0xD1B54A32D192ED03ULL
cdef u64 G_SLOT = 0xABC98388FB8FAC03ULL
cdef u64 SLOT_SALT = 0x8CB92BA72F3D8DD7ULL
cdef double INV53 = 1.0 / 9007199254740992.0


cdef inline u64 _mix(u64 z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _uniform(u64 key, u64 step, u64 particle, u64 slot) nogil:
    cdef u64 h = _mix(key + particle * G_PARTICLE)
    h = _mix(h ^ (step * G_STEP + 1ULL))
    h = _mix(h + slot * G_SLOT + SLOT_SALT)
    return ((h >> 11) + 0.5) * INV53


def uniform_cube(u64 key, long long step0, long long n_steps,
                 long long p0, long long n_particles, long long n_slots,
                 double[:, :, ::1] out):
    """Fill ``out[i, p, s]`` with U(key, step0 + i, p0 + p, s)."""
    cdef long long i, p, s
    with nogil:
        for i in range(n_steps):
            for p in range(n_particles):
                for s in range(n_slots):
                    out[i, p, s] = _uniform(key, <u64>(step0 + i),
                                            <u64>(p0 + p), <u64>s)


def uniform_pairs(u64 key, long long[::1] steps, long long[::1] particles,
                  long long[::1] slots, double[::1] out):
    cdef Py_ssize_t k, m = out.shape[0]
    with nogil:
        for k in range(m):
            out[k] = _uniform(key, <u64>steps[k], <u64>particles[k], <u64>slots[k])


def hungarian(double[:, ::1] cost):
    """Row-to-column assignment minimising total cost (square matrix).

    Shortest augmenting path with dual potentials, O(n^3).
    """
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.zeros(n + 1, dtype=np.uint8)
    cdef double[::1] U = u, V = v, MINV = minv
    cdef long long[::1] P = p, WAY = way
    cdef unsigned char[::1] USED = used
    with nogil:
        for i in range(1, n + 1):
            P[0] = i
            j0 = 0
            for j in range(n + 1):
                MINV[j] = INFINITY
                USED[j] = 0
            while True:
                USED[j0] = 1
                i0 = P[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, n + 1):
                    if not USED[j]:
                        cur = cost[i0 - 1, j - 1] - U[i0] - V[j]
                        if cur < MINV[j]:
                            MINV[j] = cur
                            WAY[j] = j0
                        if MINV[j] < delta:
                            delta = MINV[j]
                            j1 = j
                for j in range(n + 1):
                    if USED[j]:
                        U[P[j]] += delta
                        V[j] -= delta
                    else:
                        MINV[j] -= delta
                j0 = j1
                if P[j0] == 0:
                    break
            while True:
                j1 = WAY[j0]
                P[j0] = P[j1]
                j0 = j1
                if j0 == 0:
                    break
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    return assignment


def greedy_match(double[:, ::1] a, double[:, ::1] b):
    """Match each row of ``a`` in order to its nearest unused row of ``b``."""
    cdef Py_ssize_t n = a.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k, best
    cdef double dist, diff, best_dist
    assignment = np.empty(n, dtype=np.int64)
    used = np.zeros(n, dtype=np.uint8)
    cdef long long[::1] A = assignment
    cdef unsigned char[::1] USED = used
    with nogil:
        for i in range(n):
            best = -1
            best_dist = INFINITY
            for j in range(n):
                if USED[j]:
                    continue
                dist = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    dist += diff * diff
                if dist < best_dist:
                    best_dist = dist
                    best = j
            USED[best] = 1
            A[i] = best
    return assignment
