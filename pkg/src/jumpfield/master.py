"""Decoupling field ``V(t, x, mu)`` and the master-equation residual.

``V`` is evaluated by solving the measure flow from ``(t, mu)`` and then the
pinned system from ``x``.  The residual assembles every term of the master
equation from independent estimators (finite differences in ``t``, the
derivative systems in ``x`` and ``mu``, nested value differences for the
jumps) so that a wrong field shows up as a nonzero sum.
"""

from __future__ import annotations

import csv
import json
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from jumpfield.backward import RegressionBasis
from jumpfield.drivers import TimeGrid
from jumpfield.errors import CapabilityError, StructuralError
from jumpfield.measure import ParticleCloud, bump_add_atom, subsample
from jumpfield.picard import pinned_solve, solve_flow
from jumpfield.sensitivity import fd_dv_dmu, fd_hessian_x, resolve_derivatives, solve_dmu, solve_dx

TERMS = (
    "time",
    "drift",
    "driver",
    "x_jump",
    "diffusion",
    "measure_drift",
    "measure_diffusion",
    "measure_jump",
)


def as_cloud(cloud, dim=None):
    if isinstance(cloud, ParticleCloud):
        return cloud
    pts = np.asarray(cloud, float)
    if pts.ndim <= 1 and dim is not None:
        pts = pts.reshape(-1, dim)
    return ParticleCloud(pts)


class _LRU:
    """Small thread-safe cache.  Values are computed outside the lock; the
    first insert wins, which keeps results deterministic because equal keys
    produce equal values."""

    def __init__(self, size):
        self.size = size
        self._data = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key, make):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        value = make()
        with self._lock:
            value = self._data.setdefault(key, value)
            self._data.move_to_end(key)
            while len(self._data) > self.size:
                self._data.popitem(last=False)
        return value

    def __len__(self):
        return len(self._data)


class DecouplingField:
    """Solver-backed ``V(t, x, mu)`` on the step length of ``grid``.

    Parameters
    ----------
    spec : ProblemSpec
    grid : TimeGrid
        Fixes the step length; evaluation at ``t`` uses ``grid.sub_grid(t)``.
    N, M : int
        Flow particles and pinned copies.
    seed : int
    average_limit : int
        Subsample size for the independent-copy averages in the measure
        derivative.
    """

    def __init__(self, spec, grid, N=20000, M=None, seed=0, basis=None, tol=1e-10, max_iter=20,
                 cache_size=64, average_limit=512):
        if abs(grid.T - spec.horizon) > 1e-12:
            raise StructuralError("grid must end at the problem horizon", T=grid.T, horizon=spec.horizon)
        self.spec, self.grid = spec, grid
        self.N, self.M = int(N), int(M or N)
        if self.N < 1 or self.M < 2:
            raise StructuralError("N must be positive and M at least 2", N=self.N, M=self.M)
        self.seed = int(seed)
        self.basis = basis or RegressionBasis()
        self.tol, self.max_iter = tol, max_iter
        self.average_limit = average_limit
        self._flows = _LRU(cache_size)
        self._pinned = _LRU(cache_size)

    @property
    def dim(self):
        return self.spec.coeffs.dim

    @property
    def T(self):
        return self.grid.T

    def _check_t(self, t):
        if not self.grid.t0 - 1e-12 <= t <= self.T + 1e-12:
            raise StructuralError("time outside the field's interval", t=t, t0=self.grid.t0, T=self.T)

    def _terminal(self, t):
        return t >= self.T - 1e-12 * max(1.0, abs(self.T))

    def sub_grid(self, t):
        return self.grid.sub_grid(t)

    def flow(self, t, cloud):
        cloud = as_cloud(cloud, self.dim)
        key = (round(float(t), 12), cloud.key)
        return self._flows.get(key, lambda: solve_flow(
            self.spec, self.sub_grid(t), cloud.points, self.seed, self.basis, self.tol, self.max_iter, N=self.N))

    def pinned(self, t, x, cloud):
        self._check_t(t)
        cloud = as_cloud(cloud, self.dim)
        x = np.atleast_1d(np.asarray(x, float))
        key = (round(float(t), 12), x.tobytes(), cloud.key)
        return self._pinned.get(key, lambda: pinned_solve(
            self.spec, self.sub_grid(t), x, None, self.M, self.seed, self.basis, flow=self.flow(t, cloud)))

    def eval_V(self, t, x, cloud):
        """``(value, stderr)``; exact terminal value at ``t = T``."""
        self._check_t(t)
        cloud = as_cloud(cloud, self.dim)
        x = np.atleast_1d(np.asarray(x, float))
        if self._terminal(t):
            return float(np.asarray(self.spec.coeffs.g(x[None, :], cloud), float)[0]), 0.0
        sol = self.pinned(t, x, cloud)
        return sol.value, sol.stderr

    def value(self, t, x, cloud):
        return self.eval_V(t, x, cloud)[0]

    def eval_linear_derivative(self, t, x, cloud, y, normalized=False, limit=64):
        """``(N+1) [V(mu + atom y) - V(mu + atom at barycentre)]``.

        With ``normalized`` the cloud average of the raw estimator (over a
        fixed-stride subsample of at most ``limit`` atoms) is subtracted.
        """
        cloud = as_cloud(cloud, self.dim)
        ref = self.value(t, x, bump_add_atom(cloud, cloud.mean))

        def raw(point):
            return (cloud.N + 1) * (self.value(t, x, bump_add_atom(cloud, point)) - ref)

        out = raw(y)
        if normalized:
            out -= float(np.mean([raw(p) for p in subsample(cloud, limit)]))
        return out

    def linear_derivative_diff(self, t, x, cloud, y1, y0):
        """``dV/dmu(y1) - dV/dmu(y0)``; the normalisation constant cancels."""
        cloud = as_cloud(cloud, self.dim)
        return (cloud.N + 1) * (
            self.value(t, x, bump_add_atom(cloud, y1)) - self.value(t, x, bump_add_atom(cloud, y0))
        )

    def grad_x(self, t, x, cloud):
        x = np.atleast_1d(np.asarray(x, float))
        if self._terminal(t):
            deriv = resolve_derivatives(self.spec.coeffs)
            if deriv.g_x is None:
                return np.zeros(self.dim)
            return np.asarray(deriv.g_x(x[None, :], as_cloud(cloud, self.dim)), float)[0]
        return solve_dx(self.pinned(t, x, cloud), self.spec, basis=self.basis).value

    def lions(self, t, x, cloud, v):
        x = np.atleast_1d(np.asarray(x, float))
        v = np.atleast_1d(np.asarray(v, float))
        if self._terminal(t):
            deriv = resolve_derivatives(self.spec.coeffs)
            if deriv.g_mu is None:
                return np.zeros(self.dim)
            out = deriv.g_mu(x[None, None, :], as_cloud(cloud, self.dim), v[None, None, :])
            return np.broadcast_to(np.asarray(out, float), (1, 1, self.dim))[0, 0].copy()
        return solve_dmu(self.pinned(t, x, cloud), self.spec, basis=self.basis, v=v,
                         average_limit=self.average_limit).value

    def dv_lions(self, t, x, cloud, v, eps=1e-2):
        v = np.atleast_1d(np.asarray(v, float))
        if self._terminal(t):
            out = np.empty((self.dim, self.dim))
            for k in range(self.dim):
                e = np.zeros(self.dim)
                e[k] = eps
                out[:, k] = (self.lions(t, x, cloud, v + e) - self.lions(t, x, cloud, v - e)) / (2 * eps)
            return out
        return fd_dv_dmu(self.pinned(t, x, cloud), self.spec, basis=self.basis, v=v, eps=eps,
                         average_limit=self.average_limit)

    def hessian_x(self, t, x, cloud, eps=1e-2):
        return fd_hessian_x(self, t, x, cloud, eps)


class PerturbedField:
    """``V + eps (T - t)``: a non-solution used to check the residual detects errors.

    Space and measure derivatives are those of the wrapped field.
    """

    def __init__(self, base, eps=0.2):
        self.base, self.eps = base, float(eps)
        self.spec, self.grid = base.spec, base.grid

    def __getattr__(self, name):
        return getattr(self.base, name)

    def eval_V(self, t, x, cloud):
        v, se = self.base.eval_V(t, x, cloud)
        return v + self.eps * (self.base.T - t), se

    def value(self, t, x, cloud):
        return self.eval_V(t, x, cloud)[0]

    def hessian_x(self, t, x, cloud, eps=1e-2):
        return fd_hessian_x(self, t, x, cloud, eps)


@dataclass
class FDSteps:
    x: float = 1e-2
    t: Optional[float] = None  # one grid step
    v: float = 1e-2
    subsample: int = 64


@dataclass
class ResidualReport:
    t: float
    x: List[float]
    cloud_key: str
    terms: Dict[str, float]
    tolerances: Dict[str, float]
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(self.terms[k] for k in TERMS))

    def rows(self):
        return [(self.t, self.x, k, self.terms[k], self.tolerances.get(k, 0.0)) for k in TERMS]

    def to_dict(self):
        return asdict(self)


def write_residual_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "t", "x", "term", "value", "tolerance"])
        for p, rep in enumerate(reports):
            xs = " ".join(f"{v:.17g}" for v in rep.x)
            for _, _, name, val, tol in rep.rows():
                w.writerow([p, f"{rep.t:.17g}", xs, name, f"{val:.17g}", f"{tol:.17g}"])
            w.writerow([p, f"{rep.t:.17g}", xs, "total", f"{rep.total:.17g}",
                        f"{sum(rep.tolerances.values()):.17g}"])


def residual_summary(reports):
    return {
        "points": len(reports),
        "max_abs_total": max((abs(r.total) for r in reports), default=0.0),
        "reports": [r.to_dict() for r in reports],
    }


def write_residual_json(path, reports):
    with open(path, "w") as fh:
        json.dump(residual_summary(reports), fh, indent=2, sort_keys=True)


def _time_derivative(field, t, x, cloud, eps):
    """Central difference, second-order one-sided near the interval ends."""
    t0, T = field.grid.t0, field.grid.T
    V = lambda s: field.value(s, x, cloud)  # noqa: E731
    if t - eps < t0 - 1e-12:
        if t + 2 * eps <= T + 1e-12:
            return (-3 * V(t) + 4 * V(t + eps) - V(t + 2 * eps)) / (2 * eps)
        return (V(t + eps) - V(t)) / eps
    if t + eps > T + 1e-12:
        if t - 2 * eps >= t0 - 1e-12:
            return (3 * V(t) - 4 * V(t - eps) + V(t - 2 * eps)) / (2 * eps)
        return (V(t) - V(t - eps)) / eps
    return (V(t + eps) - V(t - eps)) / (2 * eps)


def residual(field, sensitivities=None, t=0.0, x=0.0, cloud=None, fd_steps=None):
    """Term-by-term master-equation residual at ``(t, x, cloud)``.

    ``field`` provides ``value``/``eval_V``, ``grad_x``, ``lions``,
    ``dv_lions``, ``hessian_x`` and ``linear_derivative_diff``.
    ``sensitivities``, when given, overrides any of those derivative methods
    (and may provide ``time_derivative``); otherwise ``field`` supplies them.
    """
    fd = fd_steps or FDSteps()
    spec = field.spec
    coeffs = spec.coeffs
    d = coeffs.dim
    x = np.atleast_1d(np.asarray(x, float))
    cloud = as_cloud(cloud if cloud is not None else np.zeros((1, d)), d)
    src = sensitivities if sensitivities is not None else field
    for name in ("grad_x", "lions", "dv_lions", "hessian_x"):
        if not hasattr(src, name) and not hasattr(field, name):
            raise CapabilityError("sensitivity estimator missing", estimator=name)

    def pick(name):
        return getattr(src, name, None) or getattr(field, name)

    grad_x, lions, dv_lions, hess = pick("grad_x"), pick("lions"), pick("dv_lions"), pick("hessian_x")
    eps_t = fd.t if fd.t is not None else field.grid.dt
    tol = {}

    V, se = field.eval_V(t, x, cloud)
    if hasattr(src, "time_derivative"):
        dt_V = float(src.time_derivative(t, x, cloud))
    else:
        dt_V = _time_derivative(field, t, x, cloud, eps_t)
        tol["time"] = 2 * se / eps_t
    gx = np.asarray(grad_x(t, x, cloud), float).reshape(d)
    P1 = x[None, :]
    yv = np.array([V])
    sig = np.asarray(coeffs.sigma(t, P1, cloud, yv), float)[0]
    z = gx @ sig
    b = np.asarray(coeffs.b(t, P1, cloud, yv, z[None, :]), float)[0]
    terms = {
        "time": dt_V,
        "drift": float(b @ gx),
        "driver": float(np.asarray(coeffs.f(t, P1, cloud, yv, z[None, :]), float)[0]),
    }
    jump = coeffs.jump
    xj = 0.0
    for k in range(jump.K):
        hk = np.asarray(coeffs.h(t, P1, cloud, yv, jump.marks[k]), float)[0]
        xj += jump.weights[k] * (field.value(t, x + hk, cloud) - V)
    terms["x_jump"] = float(xj)
    H = np.asarray(hess(t, x, cloud, fd.x), float).reshape(d, d)
    terms["diffusion"] = float(0.5 * np.sum((sig @ sig.T) * H))
    tol["diffusion"] = 2 * se / fd.x**2 if not hasattr(src, "time_derivative") else 0.0

    # measure terms: average over a fixed-stride subsample of the cloud
    pts = subsample(cloud, fd.subsample)
    need_y = not coeffs.decoupled
    m_drift = m_diff = m_jump = 0.0
    for yj in pts:
        if need_y:
            Vj = field.value(t, yj, cloud)
            zj = np.asarray(grad_x(t, yj, cloud), float).reshape(d) @ np.asarray(
                coeffs.sigma(t, yj[None, :], cloud, np.array([Vj])), float)[0]
        else:
            Vj, zj = 0.0, np.zeros(d)
        Yj = np.array([Vj])
        bj = np.asarray(coeffs.b(t, yj[None, :], cloud, Yj, zj[None, :]), float)[0]
        sj = np.asarray(coeffs.sigma(t, yj[None, :], cloud, Yj), float)[0]
        # skip nested derivative solves when their multiplier vanishes
        if np.any(bj != 0):
            m_drift += float(np.asarray(lions(t, x, cloud, yj), float).reshape(d) @ bj)
        a = sj @ sj.T
        if np.any(a != 0):
            m_diff += 0.5 * float(np.sum(np.asarray(dv_lions(t, x, cloud, yj, fd.v), float).reshape(d, d) * a))
        for k in range(jump.K):
            hk = np.asarray(coeffs.h(t, yj[None, :], cloud, Yj, jump.marks[k]), float)[0]
            m_jump += jump.weights[k] * field.linear_derivative_diff(t, x, cloud, yj + hk, yj)
    q = len(pts)
    terms["measure_drift"] = m_drift / q
    terms["measure_diffusion"] = m_diff / q
    terms["measure_jump"] = float(m_jump) / q
    tol.setdefault("time", 0.0)
    for k in TERMS:
        tol.setdefault(k, 0.0)
    return ResidualReport(float(t), [float(v) for v in x], cloud.key, terms, tol)


def flow_consistency(field, base, sample_points):
    """Max ``|Y_s - V(s, X_s, mu_s)|`` over sampled ``(particle, step)`` pairs.

    ``base`` is a :class:`~jumpfield.picard.FlowSolution` or a
    :class:`~jumpfield.picard.SolutionBundle`.  Returns
    ``(max_deviation, tolerance, rows)`` where the tolerance is three times
    the largest Monte Carlo standard error among the fresh evaluations.
    """
    paths = base.paths
    bundle = base.backward() if callable(getattr(base, "backward", None)) else base.backward
    times = paths.grid.times
    rows = []
    for p, i in sample_points:
        s = float(times[i])
        x = paths.states[i, p]
        v, se = field.eval_V(s, x, paths.flow[i])
        rows.append((int(p), int(i), s, float(bundle.Y[i, p]), v, se))
    dev = max((abs(r[3] - r[4]) for r in rows), default=0.0)
    tol = 3 * max((r[5] for r in rows), default=0.0)
    return dev, tol, rows


def sample_pairs(n_particles, n_steps, count, seed, include_terminal=False):
    """Deterministic ``(particle, step)`` pairs for :func:`flow_consistency`."""
    rng = np.random.default_rng(seed)
    hi = n_steps + 1 if include_terminal else n_steps
    return [(int(rng.integers(n_particles)), int(rng.integers(1, hi))) for _ in range(count)]
