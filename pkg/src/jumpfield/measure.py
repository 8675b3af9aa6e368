"""Empirical measures: particle clouds, W2 distance and perturbations."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from jumpfield import kernels
from jumpfield.errors import StructuralError

EXACT_ASSIGNMENT_LIMIT = 512


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Equal-weight empirical measure on R^d, stored as an ``(N, d)`` array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise StructuralError("a cloud needs at least one point", shape=list(pts.shape))
        if not np.all(np.isfinite(pts)):
            raise StructuralError("cloud coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def dirac(cls, x, dim=None):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if dim is not None and x.size == 1 and dim > 1:
            x = np.full(dim, float(x[0]))
        return cls(x[None, :])

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @cached_property
    def mean(self):
        return self.points.mean(axis=0)

    @cached_property
    def second_moment(self):
        return float(np.mean(np.sum(self.points**2, axis=1)))

    @cached_property
    def key(self):
        """Content hash; equal clouds (same order) share a key."""
        h = hashlib.sha1(self.points.tobytes())
        h.update(np.asarray(self.points.shape, dtype=np.int64).tobytes())
        return h.hexdigest()

    def replicate(self, n_particles):
        """Tile the atoms so every atom carries the same number of particles."""
        reps = max(1, -(-n_particles // self.N))
        idx = np.arange(self.N * reps) % self.N
        return self.points[idx]

    def to_csv(self, path):
        np.savetxt(path, self.points, delimiter=",")

    @classmethod
    def from_csv(cls, path):
        return cls(np.loadtxt(path, delimiter=",", ndmin=2))


class MeasureFlow:
    """One cloud per grid node, viewed over a ``(n+1, N, d)`` state array."""

    def __init__(self, states):
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 3:
            raise StructuralError("a measure flow needs a (steps, N, d) array")
        self.states = states
        self._clouds = {}

    @classmethod
    def from_clouds(cls, clouds):
        sizes = {(c.N, c.dim) for c in clouds}
        if len(sizes) != 1:
            raise StructuralError("clouds in a flow must share N and d")
        return cls(np.stack([c.points for c in clouds]))

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, i):
        if i < 0:
            i += len(self)
        cloud = self._clouds.get(i)
        if cloud is None:
            cloud = ParticleCloud(self.states[i])
            self._clouds[i] = cloud
        return cloud

    @property
    def clouds(self):
        return [self[i] for i in range(len(self))]


class W2Distance(float):
    """A W2 value; ``exact`` is False when only a matching upper bound was found."""

    exact: bool = True

    def __new__(cls, value, exact=True, assignment=None):
        obj = super().__new__(cls, value)
        obj.exact = exact
        obj.assignment = assignment
        return obj


def _as_points(c):
    return c.points if isinstance(c, ParticleCloud) else np.atleast_2d(np.asarray(c, float))


def matching_cost(a, b, assignment):
    """Root mean squared displacement of an explicit matching (a W2 upper bound)."""
    pa, pb = _as_points(a), _as_points(b)
    return float(np.sqrt(np.mean(np.sum((pa - pb[assignment]) ** 2, axis=1))))


def wasserstein2(a, b, *, exact_limit=EXACT_ASSIGNMENT_LIMIT, backend=None):
    """W2 between two equal-size, equal-weight clouds.

    Sorted matching in one dimension; optimal assignment on squared distances
    for ``N <= exact_limit`` otherwise; a greedy matching (upper bound, marked
    ``exact=False``) beyond that.
    """
    pa, pb = _as_points(a), _as_points(b)
    if pa.shape != pb.shape:
        raise StructuralError(
            "W2 needs clouds of equal size and dimension",
            left=list(pa.shape),
            right=list(pb.shape),
        )
    n, d = pa.shape
    if d == 1:
        ia, ib = np.argsort(pa[:, 0], kind="stable"), np.argsort(pb[:, 0], kind="stable")
        assignment = np.empty(n, dtype=np.int64)
        assignment[ia] = ib
        diff = pa[ia, 0] - pb[ib, 0]
        return W2Distance(np.sqrt(np.mean(diff * diff)), True, assignment)
    if n <= exact_limit:
        cost = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
        assignment = kernels.hungarian(cost, backend=backend)
        return W2Distance(matching_cost(pa, pb, assignment), True, assignment)
    assignment = kernels.greedy_match(pa, pb, backend=backend)
    return W2Distance(matching_cost(pa, pb, assignment), False, assignment)


def assignment_w2(a, b, *, backend=None):
    """W2 from the assignment solver regardless of dimension (test oracle route)."""
    pa, pb = _as_points(a), _as_points(b)
    cost = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
    assignment = kernels.hungarian(cost, backend=backend)
    return matching_cost(pa, pb, assignment)


def bump_add_atom(cloud, y):
    """Append ``y``: the equal-weight cloud for (1 - eps) mu + eps delta_y, eps = 1/(N+1)."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (cloud.dim,) or not np.all(np.isfinite(y)):
        raise StructuralError("bump point must be a finite d-vector", dim=cloud.dim)
    return ParticleCloud(np.vstack([cloud.points, y[None, :]]))


def shift_atom(cloud, index, delta):
    """Push-forward moving a single atom by ``delta``."""
    if not 0 <= index < cloud.N:
        raise StructuralError("atom index out of range", index=int(index), N=cloud.N)
    pts = cloud.points.copy()
    pts[index] += np.broadcast_to(np.asarray(delta, dtype=np.float64), (cloud.dim,))
    return ParticleCloud(pts)


def shift_all(cloud, delta):
    return ParticleCloud(cloud.points + np.asarray(delta, dtype=np.float64))


def subsample(cloud, limit=64):
    """Fixed-stride subsample of at most ``limit`` atoms."""
    stride = max(1, -(-cloud.N // limit))
    return cloud.points[::stride]
