"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy twins
in :mod:`jumpfield._fallback` take over.  Set ``JUMPFIELD_BACKEND=python``
to force the fallback.  Both backends give identical results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from jumpfield import _fallback

_compiled = None
if os.environ.get("JUMPFIELD_BACKEND", "").lower() != "python":
    try:
        from jumpfield import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"

_threads = None


def _impl(name, backend=None):
    backend = backend or BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return getattr(_compiled, name)
    return getattr(_fallback, name)


def set_threads(n):
    """Cap the data-parallel width used by kernel wrappers (``None`` = env)."""
    global _threads
    _threads = None if n is None else max(1, int(n))


def get_threads():
    if _threads is not None:
        return _threads
    env = os.environ.get("JUMPFIELD_THREADS")
    return max(1, int(env)) if env else 1


def uniform_cube(key, step0, n_steps, n_particles, n_slots, *, backend=None, threads=None):
    """Uniforms of shape ``(n_steps, n_particles, n_slots)`` on the counter lattice.

    The value at ``[i, p, s]`` depends only on ``(key, step0 + i, p, s)``, so
    chunking over particles (and hence the thread count) never changes it.
    """
    out = np.empty((n_steps, n_particles, n_slots), dtype=np.float64)
    if n_steps == 0 or n_particles == 0 or n_slots == 0:
        return out
    fn = _impl("uniform_cube", backend)
    threads = threads or get_threads()
    key = int(key) & 0xFFFFFFFFFFFFFFFF
    if threads == 1 or n_particles < 2 * threads:
        buf = np.empty((n_steps, n_particles, n_slots))
        fn(key, step0, n_steps, 0, n_particles, n_slots, buf)
        return buf
    bounds = np.linspace(0, n_particles, threads + 1).astype(int)

    def work(lo, hi):
        buf = np.empty((n_steps, hi - lo, n_slots))
        fn(key, step0, n_steps, lo, hi - lo, n_slots, buf)
        out[:, lo:hi, :] = buf

    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(work, bounds[:-1], bounds[1:]))
    return out


def uniform_pairs(key, steps, particles, slots, *, backend=None):
    steps = np.ascontiguousarray(steps, dtype=np.int64)
    particles = np.ascontiguousarray(particles, dtype=np.int64)
    slots = np.ascontiguousarray(slots, dtype=np.int64)
    out = np.empty(steps.shape[0], dtype=np.float64)
    if out.size:
        _impl("uniform_pairs", backend)(int(key) & 0xFFFFFFFFFFFFFFFF, steps, particles, slots, out)
    return out


def hungarian(cost, *, backend=None):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("assignment cost must be a square matrix")
    if cost.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return np.asarray(_impl("hungarian", backend)(cost), dtype=np.int64)


def greedy_match(a, b, *, backend=None):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return np.asarray(_impl("greedy_match", backend)(a, b), dtype=np.int64)


def mix64(value):
    """SplitMix64 finaliser on a Python int (used to derive stream keys)."""
    with np.errstate(over="ignore"):
        return int(_fallback.mix64(np.uint64(int(value) & 0xFFFFFFFFFFFFFFFF)))
