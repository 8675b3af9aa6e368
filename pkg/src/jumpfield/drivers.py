"""Seeded Brownian increments and Poisson jump counts on a time grid.

Every random draw is a pure function of ``(seed, stream, step, particle,
slot)``, so a bundle is reproducible bit for bit whatever the thread count
or particle chunking.  Per step and particle the slots are laid out as::

    [0, d)          Box-Muller radius uniforms
    [d, 2d)         Box-Muller angle uniforms
    [2d, 2d + K)    one inversion uniform per jump atom

Jumps are stored as per-atom counts.  Independent Poisson counts with means
``w_k dt`` are the same in law as a Poisson(lam dt) total with marks drawn
iid from ``w / lam``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from jumpfield import kernels
from jumpfield.errors import StructuralError

STREAMS = {"mv": 1, "pinned": 2, "vcopy": 3, "init": 4, "probe": 5, "oracle": 6}
_GOLDEN = 0x9E3779B97F4A7C15
_MAGIC = b"JFNB"
_VERSION = 1


def stream_key(seed, stream):
    code = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return kernels.mix64(kernels.mix64(seed) + code * _GOLDEN)


def normals_from_uniforms(u, d):
    r = np.sqrt(-2.0 * np.log(u[..., :d]))
    return r * np.cos(2.0 * math.pi * u[..., d : 2 * d])


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise StructuralError("time grid needs t0 < T", t0=self.t0, T=self.T)
        if int(self.steps) < 1:
            raise StructuralError("time grid needs at least one step", steps=self.steps)
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self):
        return (self.T - self.t0) / self.steps

    @property
    def n(self):
        return self.steps

    @property
    def times(self):
        t = self.t0 + self.dt * np.arange(self.steps + 1)
        t[-1] = self.T
        return t

    def sub_grid(self, t):
        """Grid on ``[t, T]`` with (about) the same step length."""
        return TimeGrid(t, self.T, max(1, round((self.T - t) / self.dt)))

    def index_of(self, t):
        i = int(round((t - self.t0) / self.dt))
        if not 0 <= i <= self.steps or abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise StructuralError("time is not a grid node", t=t)
        return i


def poisson_cdf(mean, tail=1e-17):
    """Cumulative table for inversion, last entry forced to exactly 1."""
    if mean <= 0:
        return np.ones(1)
    terms = [math.exp(-mean)]
    total = terms[0]
    k = 0
    while 1.0 - total > tail and k < 1000:
        k += 1
        terms.append(terms[-1] * mean / k)
        total += terms[-1]
    cdf = np.cumsum(terms)
    cdf[-1] = 1.0
    return cdf


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Frozen noise for ``n`` steps and ``N`` particles.

    ``dW`` has shape ``(n, N, d)`` and ``counts`` (per-atom jump counts) has
    shape ``(n, N, K)``.
    """

    seed: int
    grid: TimeGrid
    dW: np.ndarray
    counts: np.ndarray
    jump_weights: np.ndarray
    stream: str = "mv"

    def __post_init__(self):
        for name in ("dW", "counts"):
            arr = getattr(self, name)
            arr.flags.writeable = False
        if self.dW.shape[:2] != self.counts.shape[:2]:
            raise StructuralError("brownian and jump arrays disagree on (n, N)")

    @property
    def N(self):
        return self.dW.shape[1]

    @property
    def dim(self):
        return self.dW.shape[2]

    @property
    def K(self):
        return self.counts.shape[2]

    def marks_at(self, jump, step, particle):
        """Marks of the jumps of one particle in one step (atom order)."""
        out = []
        for k in range(self.K):
            out.extend([jump.marks[k].copy()] * int(self.counts[step, particle, k]))
        return out

    def compensated_counts(self):
        """``count_k - w_k dt``: the compensated measure of each atom per step."""
        return self.counts - self.jump_weights * self.grid.dt

    def identical(self, other):
        return self.to_bytes() == other.to_bytes()

    def to_bytes(self):
        """Little-endian dump: header then ``dW`` (float64) and counts (int32)."""
        n, N, d = self.dW.shape
        header = struct.pack(
            "<4sIQIIIIdd", _MAGIC, _VERSION, self.seed & 0xFFFFFFFFFFFFFFFF,
            n, N, d, self.K, self.grid.t0, self.grid.T,
        )
        return b"".join((
            header,
            np.ascontiguousarray(self.jump_weights, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.dW, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.counts, dtype="<i4").tobytes(),
        ))

    def dump(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        size = struct.calcsize("<4sIQIIIIdd")
        magic, version, seed, n, N, d, K, t0, T = struct.unpack_from("<4sIQIIIIdd", blob)
        if magic != _MAGIC or version != _VERSION:
            raise StructuralError("not a noise bundle dump", magic=repr(magic), version=version)
        off = size
        weights = np.frombuffer(blob, "<f8", K, off).astype(np.float64)
        off += 8 * K
        dW = np.frombuffer(blob, "<f8", n * N * d, off).reshape(n, N, d).astype(np.float64)
        off += 8 * n * N * d
        counts = np.frombuffer(blob, "<i4", n * N * K, off).reshape(n, N, K).astype(np.int32)
        return cls(seed, TimeGrid(t0, T, n), dW, counts, weights)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def sample_noise(grid, jump, particles, seed, *, dim=1, stream="mv", step0=0, threads=None, backend=None):
    """Draw the Brownian increments and per-atom jump counts.

    ``step0`` offsets the step counter, so consecutive calls can extend a
    bundle without overlap.
    """
    if particles < 1:
        raise StructuralError("at least one particle is required", particles=particles)
    n, d, K = grid.steps, int(dim), jump.K
    dW = np.empty((n, particles, d))
    counts = np.zeros((n, particles, K), dtype=np.int32)
    cdfs = [poisson_cdf(w * grid.dt) for w in jump.weights]
    key = stream_key(seed, stream)
    sqdt = math.sqrt(grid.dt)
    for i in range(n):
        u = kernels.uniform_cube(key, step0 + i, 1, particles, 2 * d + K, threads=threads, backend=backend)[0]
        dW[i] = sqdt * normals_from_uniforms(u, d)
        for k in range(K):
            counts[i, :, k] = np.searchsorted(cdfs[k], u[:, 2 * d + k], side="left")
    return NoiseBundle(int(seed), grid, dW, counts, jump.weights.copy(), stream)


def compensated_integral_check(bundle, jump):
    """Particle mean of the compensated measure of the whole mark space."""
    if bundle.K != jump.K or not np.allclose(bundle.jump_weights, jump.weights, rtol=0, atol=1e-15):
        raise StructuralError(
            "noise bundle was drawn for a different jump measure",
            bundle_weights=bundle.jump_weights.tolist(),
            jump_weights=jump.weights.tolist(),
        )
    total = int(bundle.counts.sum(dtype=np.int64))
    lam = jump.total_mass
    return (total - lam * (bundle.grid.T - bundle.grid.t0) * bundle.N) / bundle.N
