"""Pure-Python/numpy twins of the compiled kernels.

Every function here produces bit-identical output to its counterpart in
``_kernels.pyx``; the uniform generator is integer arithmetic end to end so
there is no floating-point divergence between the two backends.
"""

from __future__ import annotations

import numpy as np

_M64 = np.uint64
G_PARTICLE = _M64(0x9E3779B97F4A7C15)
G_STEP = _M64(0xD1B54A32D192ED03)
G_SLOT = _M64(0xABC98388FB8FAC03)
SLOT_SALT = _M64(0x8CB92BA72F3D8DD7)
_C1 = _M64(0xBF58476D1CE4E5B9)
_C2 = _M64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = _M64(30), _M64(27), _M64(31), _M64(11)
_INV53 = 1.0 / 9007199254740992.0


def mix64(z):
    z = (z ^ (z >> _S30)) * _C1
    z = (z ^ (z >> _S27)) * _C2
    return z ^ (z >> _S31)


def _uniform(key, step, particle, slot):
    with np.errstate(over="ignore"):
        h = mix64(_M64(key) + particle * G_PARTICLE)
        h = mix64(h ^ (step * G_STEP + _M64(1)))
        h = mix64(h + slot * G_SLOT + SLOT_SALT)
    return ((h >> _S11).astype(np.float64) + 0.5) * _INV53


def uniform_cube(key, step0, n_steps, p0, n_particles, n_slots, out):
    steps = np.arange(step0, step0 + n_steps, dtype=np.uint64)[:, None, None]
    parts = np.arange(p0, p0 + n_particles, dtype=np.uint64)[None, :, None]
    slots = np.arange(n_slots, dtype=np.uint64)[None, None, :]
    out[...] = _uniform(key, steps, parts, slots)


def uniform_pairs(key, steps, particles, slots, out):
    out[...] = _uniform(
        key,
        steps.astype(np.uint64),
        particles.astype(np.uint64),
        slots.astype(np.uint64),
    )


def hungarian(cost):
    """Shortest augmenting path assignment; inner scan vectorised."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = np.empty(n, dtype=np.int64)
    assignment[p[1:] - 1] = np.arange(n)
    return assignment


def greedy_match(a, b):
    n = a.shape[0]
    assignment = np.empty(n, dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    for i in range(n):
        dist = np.sum((b - a[i]) ** 2, axis=1)
        dist[used] = np.inf
        j = int(np.argmin(dist))
        used[j] = True
        assignment[i] = j
    return assignment
