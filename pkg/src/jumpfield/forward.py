"""Euler stepping of the forward McKean-Vlasov SDE with jumps.

Within a step the drift and diffusion increments are applied first and the
jumps of the step after them; every jump displacement is evaluated at the
pre-jump state ``X_i`` and the jump integral is against the raw counts (no
compensator in the state equation).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from jumpfield.errors import DivergenceError, StructuralError
from jumpfield.measure import MeasureFlow, ParticleCloud


@dataclass
class FeedbackProcesses:
    """The ``(y, z)`` input of the forward equation.

    ``mode="path"`` stores values per step and particle (``y``: ``(n+1, P)``,
    ``z``: ``(n, P, d)``); ``mode="state"`` stores per-step functions of the
    state.  ``FeedbackProcesses.zeros`` is the starting point of the Picard
    iteration.
    """

    mode: str
    y: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    value_fns: Optional[Sequence[Callable]] = None
    z_fns: Optional[Sequence[Callable]] = None

    def __post_init__(self):
        if self.mode == "path":
            if self.y is None or self.z is None:
                raise StructuralError("path-indexed feedback needs y and z arrays")
            if self.y.shape[1] != self.z.shape[1] or self.y.shape[0] != self.z.shape[0] + 1:
                raise StructuralError(
                    "feedback arrays must be (n+1, P) and (n, P, d)",
                    y=list(self.y.shape), z=list(self.z.shape),
                )
            if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.z))):
                raise StructuralError("feedback values must be finite")
        elif self.mode == "state":
            if self.value_fns is None or self.z_fns is None:
                raise StructuralError("state feedback needs value and z functions")
        else:
            raise StructuralError(f"unknown feedback mode {self.mode!r}")

    @classmethod
    def zeros(cls, n, particles, dim):
        return cls("path", np.zeros((n + 1, particles)), np.zeros((n, particles, dim)))

    @classmethod
    def path(cls, y, z):
        return cls("path", np.asarray(y, float), np.asarray(z, float))

    @classmethod
    def state(cls, value_fns, z_fns):
        return cls("state", value_fns=list(value_fns), z_fns=list(z_fns))

    def check_size(self, n, particles, dim):
        if self.mode == "path":
            if self.y.shape != (n + 1, particles) or self.z.shape != (n, particles, dim):
                raise StructuralError(
                    "feedback does not match the grid and particle count",
                    expected=[n + 1, particles, dim],
                    y=list(self.y.shape),
                    z=list(self.z.shape),
                )
        elif len(self.value_fns) < n + 1 or len(self.z_fns) < n:
            raise StructuralError("state feedback has too few steps", steps=n)

    def at(self, i, x):
        if self.mode == "path":
            z = self.z[i] if i < self.z.shape[0] else np.zeros_like(self.z[0])
            return self.y[i], z
        y = np.asarray(self.value_fns[i](x), float)
        z = np.asarray(self.z_fns[i](x), float) if i < len(self.z_fns) else np.zeros_like(x)
        return y, z


@dataclass
class ForwardPaths:
    """Simulated states and the increments the backward solver reuses.

    ``diff_incr[i]`` is the drift plus diffusion part of step ``i`` and
    ``jump_disp[i, :, k]`` the displacement one jump of atom ``k`` causes
    from ``X_i``.
    """

    states: np.ndarray
    diff_incr: np.ndarray
    jump_disp: np.ndarray
    grid: object
    flow: MeasureFlow
    feedback: FeedbackProcesses = field(repr=False, default=None)
    pinned: bool = False

    @property
    def n(self):
        return self.states.shape[0] - 1

    @property
    def P(self):
        return self.states.shape[1]

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def own_flow(self):
        """Empirical law of these paths (differs from ``flow`` when pinned)."""
        return MeasureFlow(self.states)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "particle"] + [f"x{j}" for j in range(self.dim)])
            times = self.grid.times
            for i in range(self.n + 1):
                for p in range(self.P):
                    w.writerow([i, repr(float(times[i])), p] + [repr(float(v)) for v in self.states[i, p]])


def _step(coeffs, t, x, cloud, y, z, dW, counts, dt):
    drift = coeffs.b(t, x, cloud, y, z) * dt
    sig = coeffs.sigma(t, x, cloud, y)
    diff = drift + np.einsum("pjl,pl->pj", sig, dW)
    disp = coeffs.jump_increments(t, x, cloud, y)  # (K, P, d)
    jumped = np.einsum("pk,kpj->pj", counts, disp) if disp.shape[0] else 0.0
    return diff, np.moveaxis(disp, 0, 1), x + diff + jumped


def _check(x_next, i):
    bad = ~np.all(np.isfinite(x_next), axis=1)
    if np.any(bad):
        p = int(np.argmax(bad))
        raise DivergenceError(f"non-finite state at step {i + 1}, particle {p}", step=i + 1, particle=p)


def _run(coeffs, grid, feedback, noise, x0, cloud_at):
    n, P = grid.steps, x0.shape[0]
    d, K = coeffs.dim, coeffs.jump.K
    if noise.dW.shape[0] < n or noise.N != P or noise.dim != d:
        raise StructuralError(
            "noise bundle does not match the grid or particle count",
            noise=[noise.dW.shape[0], noise.N, noise.dim], expected=[n, P, d],
        )
    if noise.K != K:
        raise StructuralError("noise bundle has the wrong number of jump atoms", expected=K, got=noise.K)
    feedback.check_size(n, P, d)
    states = np.empty((n + 1, P, d))
    states[0] = x0
    diff_incr = np.empty((n, P, d))
    jump_disp = np.empty((n, P, K, d))
    times = grid.times
    counts = noise.counts
    for i in range(n):
        x = states[i]
        cloud = cloud_at(i, x)
        y, z = feedback.at(i, x)
        diff_incr[i], jump_disp[i], nxt = _step(coeffs, times[i], x, cloud, y, z, noise.dW[i], counts[i], grid.dt)
        _check(nxt, i)
        states[i + 1] = nxt
    return states, diff_incr, jump_disp


def simulate_mv(spec, feedback, noise, grid, initial=None):
    """Interacting particle system: step ``i`` sees the empirical law of all particles."""
    x0 = spec.initial_law.sample(noise.N, noise.seed) if initial is None else np.asarray(initial, float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    flow_cache = {}

    def cloud_at(i, x):
        flow_cache[i] = ParticleCloud(x)
        return flow_cache[i]

    states, diff_incr, jump_disp = _run(spec.coeffs, grid, feedback, noise, x0, cloud_at)
    flow = MeasureFlow(states)
    flow._clouds.update(flow_cache)
    return ForwardPaths(states, diff_incr, jump_disp, grid, flow, feedback, pinned=False)


def simulate_pinned(spec, frozen_flow, feedback, noise, grid, x, copies=None):
    """``copies`` paths started at ``x`` that step against a frozen measure flow."""
    if len(frozen_flow) != grid.steps + 1:
        raise StructuralError("frozen flow does not cover the grid", flow=len(frozen_flow), steps=grid.steps)
    copies = noise.N if copies is None else int(copies)
    if copies < 1:
        raise StructuralError("at least one copy is required")
    x = np.atleast_1d(np.asarray(x, float))
    if x.shape != (spec.coeffs.dim,):
        raise StructuralError("pin point has the wrong dimension", dim=spec.coeffs.dim)
    x0 = np.tile(x, (copies, 1))
    states, diff_incr, jump_disp = _run(
        spec.coeffs, grid, feedback, noise, x0, lambda i, _x: frozen_flow[i]
    )
    return ForwardPaths(states, diff_incr, jump_disp, grid, frozen_flow, feedback, pinned=True)
