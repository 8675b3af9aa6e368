"""Fixed-point iteration of the map ``F(y, z) = (Y, Z)`` on common random numbers.

Each iteration simulates the interacting particle system with the previous
``(Y, Z)`` fed back path by path, solves the BSDE by regression and measures
the change in ``||(y, z)|| = E[sup|y|^2 + int |z|^2 dt]`` (a squared norm).
All iterations reuse one noise bundle, so the empirical contraction factor
reflects the map and not sampling noise.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from jumpfield.backward import RegressionBasis, norm_theta, solve_backward
from jumpfield.drivers import TimeGrid, sample_noise, stream_key
from jumpfield.errors import NonContractionError, StructuralError
from jumpfield.forward import FeedbackProcesses, simulate_mv, simulate_pinned
from jumpfield.measure import ParticleCloud, wasserstein2
from jumpfield.model import validate_certificate


class ContractionWarning(UserWarning):
    pass


@dataclass
class PicardDiagnostics:
    iteration_norms: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    converged: bool = False
    I0sq: float = float("nan")
    apriori_C: float = float("nan")
    norm_theta: float = float("nan")
    initial_second_moment: float = float("nan")

    @property
    def iterations(self):
        return len(self.iteration_norms)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "norm", "ratio"])
            for k, v in enumerate(self.iteration_norms):
                r = self.ratios[k - 1] if k >= 1 else ""
                w.writerow([k + 1, repr(float(v)), r if r == "" else repr(float(r))])

    def to_dict(self):
        out = asdict(self)
        out["iterations"] = self.iterations
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class SolutionBundle:
    paths: object
    backward: object
    diagnostics: PicardDiagnostics
    noise: object
    grid: TimeGrid
    spec: object = field(repr=False, default=None)

    def state_feedback(self):
        """Per-step regression functions ``x -> (V_i(x), Z_i(x))`` from the final fit."""
        return FeedbackProcesses.state(self.backward.value_fns(), self.backward.z_fns())

    def residual(self, basis=None):
        """``||(Y, Z) - F(Y, Z)||`` for the stored solution."""
        fb = FeedbackProcesses.path(self.backward.Y, self.backward.Z)
        paths = simulate_mv(self.spec, fb, self.noise, self.grid, initial=self.paths.states[0])
        nxt = solve_backward(self.spec.coeffs, paths, self.noise, self.grid, basis)
        return yz_norm(nxt.Y - self.backward.Y, nxt.Z - self.backward.Z, self.grid.dt)


def yz_norm(dy, dz, dt):
    """``E[sup_i |y_i|^2 + sum_i |z_i|^2 dt]`` over the sample axis."""
    sup = np.max(dy**2, axis=0)
    integral = dt * np.sum(np.sum(dz**2, axis=2), axis=0)
    return float(np.mean(sup + integral))


def data_term(coeffs, grid):
    """``I0^2``: squared coefficient sizes at ``(x, mu, y, z) = (0, delta_0, 0, 0)``."""
    d = coeffs.dim
    x0 = np.zeros((1, d))
    y0, z0 = np.zeros(1), np.zeros((1, d))
    delta0 = ParticleCloud.dirac(np.zeros(d))
    total = 0.0
    for t in grid.times[:-1]:
        b = coeffs.b(t, x0, delta0, y0, z0)
        s = coeffs.sigma(t, x0, delta0, y0)
        f = coeffs.f(t, x0, delta0, y0, z0)
        h2 = 0.0
        for k in range(coeffs.jump.K):
            hk = coeffs.h(t, x0, delta0, y0, coeffs.jump.marks[k])
            h2 += coeffs.jump.weights[k] * float(np.sum(hk**2))
        total += grid.dt * (float(np.sum(b**2)) + float(np.sum(s**2)) + float(np.sum(f**2)) + h2)
    return total + float(np.sum(coeffs.g(x0, delta0) ** 2))


def _initial(spec, N, seed, initial):
    if initial is None:
        x0 = spec.initial_law.sample(N, seed)
    else:
        x0 = initial.points if isinstance(initial, ParticleCloud) else np.asarray(initial, float)
    return x0[:, None] if x0.ndim == 1 else x0


def picard_solve(spec, grid, N, seed, basis=None, tol=1e-10, max_iter=20, *, initial=None,
                 noise=None, check_certificate=True):
    """Solve the coupled system on ``grid`` with ``N`` particles.

    ``initial`` overrides the particles drawn from ``spec.initial_law``.
    Warns when a successive ratio is at least 1 and raises
    :class:`NonContractionError` when the iteration stalls that way.
    """
    if not tol > 0:
        raise StructuralError("tolerance must be positive", tol=tol)
    coeffs = spec.coeffs
    if check_certificate:
        report = validate_certificate(coeffs.cert, coeffs.jump)
        if not report.passed:
            raise StructuralError("certificate violates the standing assumptions", violations=report.violations)
    basis = basis or RegressionBasis()
    x0 = _initial(spec, N, seed, initial)
    P, n, d = x0.shape[0], grid.steps, coeffs.dim
    if noise is None:
        noise = sample_noise(grid, coeffs.jump, P, seed, dim=d, stream="mv")
    diag = PicardDiagnostics()
    feedback = FeedbackProcesses.zeros(n, P, d)
    prev_y, prev_z = feedback.y, feedback.z
    paths = bundle = None
    for it in range(max_iter):
        paths = simulate_mv(spec, feedback, noise, grid, initial=x0)
        bundle = solve_backward(coeffs, paths, noise, grid, basis)
        diff = yz_norm(bundle.Y - prev_y, bundle.Z - prev_z, grid.dt)
        diag.iteration_norms.append(diff)
        if it >= 1:
            last = diag.iteration_norms[-2]
            ratio = diff / last if last > 0 else 0.0
            diag.ratios.append(ratio)
            if ratio >= 1:
                warnings.warn(
                    f"Picard ratio {ratio:.3g} >= 1 at iteration {it + 1}; the horizon may be too long",
                    ContractionWarning,
                    stacklevel=2,
                )
        if diff <= tol:
            diag.converged = True
            break
        prev_y, prev_z = bundle.Y, bundle.Z
        feedback = FeedbackProcesses.path(bundle.Y, bundle.Z)
    if not diag.converged:
        tail = diag.ratios[-2:]
        if tail and all(r >= 1 for r in tail):
            raise NonContractionError(
                "Picard iteration does not contract; try a shorter horizon",
                ratios=diag.ratios,
                horizon=grid.T - grid.t0,
            )
        warnings.warn(
            f"Picard iteration stopped after {max_iter} iterations above tolerance {tol:g}",
            ContractionWarning,
            stacklevel=2,
        )
    diag.I0sq = data_term(coeffs, grid)
    diag.norm_theta = norm_theta(paths, bundle, coeffs.jump, grid)
    diag.initial_second_moment = float(np.mean(np.sum(x0**2, axis=1)))
    denom = diag.initial_second_moment + diag.I0sq
    diag.apriori_C = diag.norm_theta / denom if denom > 0 else float("inf")
    return SolutionBundle(paths, bundle, diag, noise, grid, spec)


def _random_feedback(rng, brownian, scale=1.0):
    """Bounded adapted inputs ``y = a + s tanh(W)``, ``z`` constant."""
    n, P, d = brownian.shape
    w = np.concatenate([np.zeros((1, P, d)), np.cumsum(brownian, axis=0)])
    a, s = rng.uniform(-scale, scale, 2)
    zc = rng.uniform(-scale, scale, d)
    y = a + s * np.tanh(w[:, :, 0])
    z = np.broadcast_to(zc, (n, P, d)).copy()
    return FeedbackProcesses.path(y, z)


def contraction_probe(spec, grid, N, seed, basis=None, pairs=8, *, scale=1.0):
    """Empirical ``||F(y1,z1) - F(y2,z2)|| / ||(y1,z1) - (y2,z2)||`` on random input pairs."""
    basis = basis or RegressionBasis()
    coeffs = spec.coeffs
    x0 = _initial(spec, N, seed, None)
    P = x0.shape[0]
    noise = sample_noise(grid, coeffs.jump, P, seed, dim=coeffs.dim, stream="mv")
    rng = np.random.default_rng(stream_key(seed, "probe"))
    ratios = []
    for _ in range(pairs):
        fb = [_random_feedback(rng, noise.dW, scale) for _ in range(2)]
        out = []
        for f in fb:
            paths = simulate_mv(spec, f, noise, grid, initial=x0)
            out.append(solve_backward(coeffs, paths, noise, grid, basis))
        num = yz_norm(out[0].Y - out[1].Y, out[0].Z - out[1].Z, grid.dt)
        den = yz_norm(fb[0].y - fb[1].y, fb[0].z - fb[1].z, grid.dt)
        ratios.append(num / den if den > 0 else 0.0)
    return ratios


@dataclass
class FlowSolution:
    """Measure flow started from a cloud, with the noise that drove it.

    ``solution`` is ``None`` for decoupled problems, where the flow needs no
    backward pass; :meth:`backward` then solves one on demand.
    """

    paths: object
    noise: object
    solution: Optional[SolutionBundle]
    spec: object = field(repr=False, default=None)
    basis: object = field(repr=False, default=None)
    _backward: object = field(repr=False, default=None)

    @property
    def flow(self):
        return self.paths.flow

    @property
    def grid(self):
        return self.paths.grid

    def backward(self):
        if self.solution is not None:
            return self.solution.backward
        if self._backward is None:
            self._backward = solve_backward(self.spec.coeffs, self.paths, self.noise, self.grid, self.basis)
        return self._backward

    def feedback(self, copies):
        if self.solution is not None:
            return self.solution.state_feedback()
        return FeedbackProcesses.zeros(self.grid.steps, copies, self.spec.coeffs.dim)


def solve_flow(spec, grid, cloud_points, seed, basis=None, tol=1e-10, max_iter=20, N=None):
    """Measure flow from a cloud: forward only when the problem is decoupled.

    With ``N`` given, the cloud is replicated to ``N0 * ceil(N / N0)``
    particles (atom ``i`` is carried by particles ``i, i + N0, ...``).
    """
    basis = basis or RegressionBasis()
    coeffs = spec.coeffs
    x0 = _initial(spec, None, seed, cloud_points)
    if N is not None:
        x0 = ParticleCloud(x0).replicate(N)
    noise = sample_noise(grid, coeffs.jump, x0.shape[0], seed, dim=coeffs.dim, stream="mv")
    if coeffs.decoupled:
        fb = FeedbackProcesses.zeros(grid.steps, x0.shape[0], coeffs.dim)
        paths = simulate_mv(spec, fb, noise, grid, initial=x0)
        return FlowSolution(paths, noise, None, spec, basis)
    sol = picard_solve(spec, grid, None, seed, basis, tol, max_iter, initial=x0, noise=noise)
    return FlowSolution(sol.paths, noise, sol, spec, basis)


@dataclass
class PinnedSolution:
    """Solution of the pinned system from ``x`` against a solved flow.

    ``value`` is the copy average of ``Y`` at the first node and ``stderr``
    the Monte Carlo error of the control-variate estimate given the flow
    (sampling error of the flow itself is not included).
    """

    value: float
    stderr: float
    x: np.ndarray
    paths: object
    backward: object
    noise: object
    flow: FlowSolution
    grid: TimeGrid
    seed: int

    @property
    def mv_paths(self):
        return self.flow.paths


def pinned_solve(spec, grid, x, cloud_points, M, seed, basis=None, *, N=None, tol=1e-10, max_iter=20,
                 flow=None, stream="pinned"):
    """Value of the pinned system at ``(grid.t0, x)`` with ``M`` copies.

    The flow is solved from ``cloud_points`` replicated to about ``N``
    particles (``N`` defaults to ``M``) unless a :class:`FlowSolution` is
    passed as ``flow``.
    """
    basis = basis or RegressionBasis()
    coeffs = spec.coeffs
    if flow is None:
        flow = solve_flow(spec, grid, cloud_points, seed, basis, tol, max_iter, N=N or M)
    x = np.atleast_1d(np.asarray(x, float))
    noise = sample_noise(grid, coeffs.jump, M, seed, dim=coeffs.dim, stream=stream)
    paths = simulate_pinned(spec, flow.flow, flow.feedback(M), noise, grid, x, M)
    bundle = solve_backward(coeffs, paths, noise, grid, basis)
    comp = noise.counts - noise.jump_weights * grid.dt
    est = bundle.pathwise_estimate(noise.dW, comp, grid.dt)
    value = float(bundle.Y[0].mean())
    stderr = float(est.std(ddof=1) / np.sqrt(M)) if M > 1 else float("inf")
    return PinnedSolution(value, stderr, x, paths, bundle, noise, flow, grid, seed)


@dataclass
class ContinuityRow:
    dxi_sq: float
    w2: float
    dx: float
    d_solution: float
    dV: float
    quotient: float
    moment_ratio_p1: float
    moment_ratio_p2: float


def continuity_probe(spec, grid, N, seed, basis=None, perturbations=(), *, x=None, M=None):
    """Re-solve under perturbed pin points and initial laws on common noise.

    Each perturbation is a mapping with optional ``"dx"`` (shift of the pin
    point) and ``"mu_shift"`` (shift of every initial particle).  Rows report
    ``E|d xi|^2``, ``W2``, ``|dx|``, the pinned solution difference
    ``||(dY, dZ, dH)||``, ``|dV|``, the quotient ``|dV| / (|dx| + W2)`` and
    the moment ratios ``E sup|dX|^{2p} / E|d xi|^{2p}`` for ``p = 1, 2``.
    """
    basis = basis or RegressionBasis()
    d = spec.coeffs.dim
    x = np.zeros(d) if x is None else np.atleast_1d(np.asarray(x, float))
    M = N if M is None else M
    base_pts = _initial(spec, N, seed, None)
    base = pinned_solve(spec, grid, x, base_pts, M, seed, basis, N=N)
    rows = []
    for pert in perturbations:
        dx = np.broadcast_to(np.asarray(pert.get("dx", 0.0), float), (d,))
        shift = np.broadcast_to(np.asarray(pert.get("mu_shift", 0.0), float), (d,))
        pts = base_pts + shift
        other = pinned_solve(spec, grid, x + dx, pts, M, seed, basis, N=N)
        dxi = np.sum((pts - base_pts) ** 2, axis=1)
        w2 = float(wasserstein2(ParticleCloud(base_pts), ParticleCloud(pts))) if np.any(shift) else 0.0
        dX = np.max(np.sum((other.mv_paths.states - base.mv_paths.states) ** 2, axis=2), axis=0)
        dY = other.backward.Y - base.backward.Y
        dZ = other.backward.Z - base.backward.Z
        dH = other.backward.H - base.backward.H
        dsol = yz_norm(dY, dZ, grid.dt) + float(
            np.mean(grid.dt * np.sum(np.sum(dH**2 * spec.coeffs.jump.weights, axis=2), axis=0))
        ) if spec.coeffs.jump.K else yz_norm(dY, dZ, grid.dt)
        dV = abs(other.value - base.value)
        denom = float(np.linalg.norm(dx)) + w2
        m1 = float(np.mean(dxi))
        m2 = float(np.mean(dxi**2))
        rows.append(ContinuityRow(
            dxi_sq=m1,
            w2=w2,
            dx=float(np.linalg.norm(dx)),
            d_solution=dsol,
            dV=dV,
            quotient=dV / denom if denom > 0 else 0.0,
            moment_ratio_p1=float(np.mean(dX)) / m1 if m1 > 0 else float("nan"),
            moment_ratio_p2=float(np.mean(dX**2)) / m2 if m2 > 0 else float("nan"),
        ))
    return rows
