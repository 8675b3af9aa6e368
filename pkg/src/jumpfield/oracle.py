"""Closed-form benchmark fields and a regression-free Monte Carlo oracle.

With ``tau = T - t``, jump drift ``a = c sum(theta w)`` and jump second
moment ``s2 = c^2 sum(theta^2 w)``, each coordinate of a particle moves by
a compound Poisson process with mean ``a tau`` and variance ``s2 tau``
(plus an independent Brownian part in A, B, C that averages out).

A : ``V = avg(x) + a tau``
B : ``V = avg(x) + s avg(m) + (1 + s) a tau`` where ``m`` is the cloud mean
    (the law at ``T`` has mean ``m + a tau``)
C : ``V = exp(kappa tau) (avg(x) + a tau)`` by Feynman-Kac with ``f = kappa y``
Q : ``b = sigma = 0``, ``g = x + int y^2 dmu``.  Every particle ends at
    ``y + J`` with ``E J = a tau`` and ``Var J = s2 tau``, so
    ``int y^2 dmu_T = m2 + 2 m1 a tau + (a tau)^2 + s2 tau`` and
    ``V = x + a tau + m2 + 2 m1 a tau + (a tau)^2 + s2 tau``.
    Hence ``dV/dmu(y) = y^2 + 2 a tau y`` (normalised by subtracting its
    cloud mean), ``d_mu V(v) = 2 v + 2 a tau`` and ``d_v d_mu V = 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from jumpfield.drivers import TimeGrid, sample_noise
from jumpfield.errors import CapabilityError, StructuralError
from jumpfield.families import build, jump_drift, jump_second
from jumpfield.forward import FeedbackProcesses, simulate_mv, simulate_pinned
from jumpfield.measure import ParticleCloud
from jumpfield.model import InitialLaw, ProblemSpec

CLOSED_FORM_FAMILIES = ("A", "B", "C", "Q")


@dataclass(frozen=True)
class BenchmarkFamily:
    id: str
    horizon: float = 0.25
    c: float = 1.0
    lam: float = 1.0
    kappa: float = 0.5
    scale: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if self.id not in CLOSED_FORM_FAMILIES:
            raise StructuralError(f"no closed form for family {self.id!r}", known=list(CLOSED_FORM_FAMILIES))

    def spec(self, x0=None):
        params = {"c": self.c, "lam": self.lam}
        if self.id != "Q":
            params["dim"] = self.dim
        if self.id == "B":
            params["scale"] = self.scale
        if self.id == "C":
            params["kappa"] = self.kappa
        coeffs = build(self.id, horizon=self.horizon, **params)
        x0 = np.zeros(coeffs.dim) if x0 is None else np.atleast_1d(np.asarray(x0, float))
        return ProblemSpec(coeffs, self.horizon, InitialLaw.point(x0))


def _cloud(cloud, d):
    if isinstance(cloud, ParticleCloud):
        return cloud
    return ParticleCloud(np.asarray(cloud, float).reshape(-1, d))


class ClosedFormField:
    """Exact ``V`` and derivatives for a built-in family in :data:`CLOSED_FORM_FAMILIES`.

    Exposes the same methods as the solver-backed field, so it can be
    injected into the residual; ``time_derivative`` is exact too.
    """

    def __init__(self, spec, grid=None):
        coeffs = spec.coeffs
        if coeffs.name not in CLOSED_FORM_FAMILIES:
            raise CapabilityError("no closed form for this family", family=coeffs.name)
        self.spec, self.coeffs = spec, coeffs
        self.id = coeffs.name
        self.T = float(spec.horizon)
        self.grid = grid or TimeGrid(0.0, self.T, 50)
        self.d = coeffs.dim
        self.a = jump_drift(coeffs)
        self.s2 = jump_second(coeffs)
        self.kappa = float(coeffs.params.get("kappa", 0.0))
        self.scale = float(coeffs.params.get("scale", 1.0))

    def _tau(self, t):
        if not -1e-12 <= t <= self.T + 1e-12:
            raise StructuralError("time outside [0, T]", t=t, T=self.T)
        return self.T - t

    def value(self, t, x, cloud):
        tau = self._tau(t)
        x = np.atleast_1d(np.asarray(x, float))
        mu = _cloud(cloud, self.d)
        ax = float(np.mean(x))
        if self.id == "A":
            return ax + self.a * tau
        if self.id == "B":
            return ax + self.scale * float(np.mean(mu.mean)) + (1 + self.scale) * self.a * tau
        if self.id == "C":
            return math.exp(self.kappa * tau) * (ax + self.a * tau)
        m1, m2 = float(mu.mean[0]), mu.second_moment
        at = self.a * tau
        return float(x[0]) + at + m2 + 2 * m1 * at + at * at + self.s2 * tau

    def eval_V(self, t, x, cloud):
        return self.value(t, x, cloud), 0.0

    def time_derivative(self, t, x, cloud):
        tau = self._tau(t)
        x = np.atleast_1d(np.asarray(x, float))
        mu = _cloud(cloud, self.d)
        if self.id == "A":
            return -self.a
        if self.id == "B":
            return -(1 + self.scale) * self.a
        if self.id == "C":
            e = math.exp(self.kappa * tau)
            return -self.kappa * e * (float(np.mean(x)) + self.a * tau) - e * self.a
        m1 = float(mu.mean[0])
        return -self.a - 2 * m1 * self.a - 2 * self.a * self.a * tau - self.s2

    def grad_x(self, t, x, cloud):
        tau = self._tau(t)
        factor = math.exp(self.kappa * tau) if self.id == "C" else 1.0
        return np.full(self.d, factor / self.d)

    def hessian_x(self, t, x, cloud, eps=None):
        return np.zeros((self.d, self.d))

    def linear_derivative(self, t, x, cloud, y):
        """Normalised ``dV/dmu(t, x, mu, y)`` (zero cloud mean)."""
        tau = self._tau(t)
        mu = _cloud(cloud, self.d)
        y = np.atleast_1d(np.asarray(y, float))
        if self.id == "B":
            return self.scale * float(np.mean(y) - np.mean(mu.mean))
        if self.id == "Q":
            at = self.a * tau
            raw = y[0] ** 2 + 2 * at * y[0]
            return float(raw - (mu.second_moment + 2 * at * mu.mean[0]))
        return 0.0

    def linear_derivative_diff(self, t, x, cloud, y1, y0):
        return self.linear_derivative(t, x, cloud, y1) - self.linear_derivative(t, x, cloud, y0)

    def lions(self, t, x, cloud, v):
        tau = self._tau(t)
        v = np.atleast_1d(np.asarray(v, float))
        if self.id == "B":
            return np.full(self.d, self.scale / self.d)
        if self.id == "Q":
            return np.array([2 * v[0] + 2 * self.a * tau])
        return np.zeros(self.d)

    def dv_lions(self, t, x, cloud, v, eps=None):
        if self.id == "Q":
            return np.array([[2.0]])
        return np.zeros((self.d, self.d))

    def z(self, t, x, cloud):
        """``Z = grad_x V . sigma``."""
        x = np.atleast_1d(np.asarray(x, float))
        sig = np.asarray(self.coeffs.sigma(t, x[None, :], _cloud(cloud, self.d), np.zeros(1)), float)[0]
        return self.grad_x(t, x, cloud) @ sig

    def jump_diff(self, t, x, cloud, k):
        """``V(t, x + h_k, mu) - V(t, x, mu)``."""
        x = np.atleast_1d(np.asarray(x, float))
        mu = _cloud(cloud, self.d)
        hk = np.asarray(self.coeffs.h(t, x[None, :], mu, np.zeros(1), self.coeffs.jump.marks[k]), float)[0]
        return self.value(t, x + hk, mu) - self.value(t, x, mu)


def closed_form_V(family, t, x, cloud):
    """Closed-form value for a :class:`BenchmarkFamily` or a built-in ``ProblemSpec``."""
    spec = family.spec() if isinstance(family, BenchmarkFamily) else family
    return ClosedFormField(spec).value(t, x, cloud)


def _driver_slope(coeffs, seed=0):
    """``kappa`` when ``f = kappa y`` (or zero) at random probes, else ``None``."""
    rng = np.random.default_rng(seed)
    d, P = coeffs.dim, 64
    x = rng.normal(size=(P, d))
    y = rng.normal(size=P)
    z = rng.normal(size=(P, d))
    cloud = ParticleCloud(rng.normal(size=(8, d)))
    t = float(rng.uniform())
    f1 = np.asarray(coeffs.f(t, x, cloud, y, z), float)
    f0 = np.asarray(coeffs.f(t, x, cloud, np.zeros(P), z), float)
    if np.max(np.abs(f0)) > 0:
        return None
    kappa = f1 / np.where(y == 0, 1.0, y)
    if np.max(np.abs(kappa - kappa[0])) > 1e-12 * max(1.0, abs(kappa[0])):
        return None
    return float(kappa[0])


def brute_force_V(spec, t, x, cloud, paths=100_000, seed=0, steps=50):
    """Plain Monte Carlo of ``exp(kappa tau) g(X_T, mu_T)``, no regression.

    The flow is an independent interacting cloud of ``paths`` particles;
    ``paths`` copies from ``x`` step against it.  Only for decoupled forward
    dynamics and drivers ``f = kappa y`` (including ``f = 0``).
    """
    if isinstance(spec, BenchmarkFamily):
        spec = spec.spec()
    coeffs = spec.coeffs
    if not coeffs.decoupled:
        raise CapabilityError("oracle needs forward dynamics free of (y, z)", family=coeffs.name)
    kappa = _driver_slope(coeffs)
    if kappa is None:
        raise CapabilityError("oracle needs a driver of the form kappa * y", family=coeffs.name)
    d = coeffs.dim
    mu = _cloud(cloud, d)
    x = np.atleast_1d(np.asarray(x, float))
    if t >= spec.horizon:
        val = np.asarray(coeffs.g(x[None, :], mu), float)[0]
        return float(val), 0.0
    grid = TimeGrid(t, spec.horizon, steps)
    fb = FeedbackProcesses.zeros(grid.steps, paths, d)
    x0 = mu.replicate(paths)
    flow_noise = sample_noise(grid, coeffs.jump, x0.shape[0], seed + 1, dim=d, stream="oracle")
    fb_flow = FeedbackProcesses.zeros(grid.steps, x0.shape[0], d)
    flow = simulate_mv(spec, fb_flow, flow_noise, grid, initial=x0).flow
    noise = sample_noise(grid, coeffs.jump, paths, seed, dim=d, stream="oracle")
    pinned = simulate_pinned(spec, flow, fb, noise, grid, x, paths)
    vals = math.exp(kappa * (spec.horizon - t)) * np.asarray(coeffs.g(pinned.states[-1], flow[grid.steps]), float)
    se = float(vals.std(ddof=1) / math.sqrt(paths)) if paths > 1 else float("inf")
    return float(vals.mean()), se
