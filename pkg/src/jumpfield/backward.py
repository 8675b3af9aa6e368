"""Backward regression (least-squares Monte Carlo) for BSDEs with jumps.

One engine serves the value system and the linear derivative systems.  It
works on flattened sample states ``S_i`` (``X`` first, then any linear
multipliers) with one scalar output per sample and, per step ``i``:

* ``Z_i``: regress ``D = Y_{i+1} - V_{i+1}(S_{i+1} - diff_i)`` on
  ``[phi(S_i), phi(S_i) * dW]``; the ``dW`` block gives ``Z``.  Subtracting
  the continuation value at the jumped-but-not-diffused state leaves the
  conditional covariance with ``dW`` unchanged and removes most of the noise.
* ``H_i(theta_k) = V_{i+1}(S_i + jump_k) - V_{i+1}(S_i)`` (state bump of the
  fitted continuation value; ``g`` itself at the last step).
* ``Y_i``: fit of ``Y_{i+1} - Z dW - sum_k H_k (count_k - w_k dt) + f dt``,
  with ``f`` evaluated once at a first fit of the explicit part.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from jumpfield.errors import DivergenceError, RegressionError, StructuralError


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial regression basis.

    ``kind="poly+mean"`` adds cloud-mean features; within one step every
    particle sees the same cloud, so those columns are constant and drop out
    of the per-step fit.  ``ridge=None`` means ``1e-8 * sample count``.
    """

    kind: str = "poly"
    degree: int = 3
    ridge: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("poly", "poly+mean"):
            raise StructuralError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise StructuralError("polynomial degree must be nonnegative")
        if self.ridge is not None and self.ridge < 0:
            raise StructuralError("ridge must be nonnegative")

    def ridge_for(self, samples):
        return 1e-8 * samples if self.ridge is None else float(self.ridge)


def _exponents(dim, degree):
    out = []
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), deg):
            e = np.zeros(dim, dtype=int)
            for c in combo:
                e[c] += 1
            out.append(e)
    return np.array(out, dtype=int).reshape(-1, dim)


class FeatureMap:
    """Standardised monomials of ``X``, optionally times linear multipliers.

    With ``n_mult > 0`` the sample state is ``[X, D]`` and the features are
    ``[1, psi(X)] * D_a`` for each multiplier ``a`` (plus ``psi(X)`` itself
    when ``plain`` is set).  Columns constant on the training set are
    dropped.  The intercept is always the first design column.
    """

    def __init__(self, train, n_x, degree, n_mult=0, plain=True):
        self.n_x, self.n_mult, self.plain = n_x, n_mult, plain
        x = train[:, :n_x]
        self.x_mean = x.mean(axis=0)
        self.x_scale = x.std(axis=0)
        self.x_scale[self.x_scale == 0] = 1.0
        self.exps = _exponents(n_x, degree)
        raw = self._raw(train)
        self.mean = raw.mean(axis=0) if raw.shape[1] else np.zeros(0)
        std = raw.std(axis=0) if raw.shape[1] else np.zeros(0)
        scale = np.maximum(np.abs(self.mean), 1.0)
        self.keep = std > 1e-12 * scale
        self.std = np.where(self.keep, std, 1.0)

    def _mono(self, x):
        u = (x - self.x_mean) / self.x_scale
        if not len(self.exps):
            return np.zeros((x.shape[0], 0))
        return np.prod(u[:, None, :] ** self.exps[None, :, :], axis=2)

    def _raw(self, s):
        mono = self._mono(s[:, : self.n_x])
        if self.n_mult == 0:
            return mono
        with_one = np.hstack([np.ones((s.shape[0], 1)), mono])
        mult = s[:, self.n_x : self.n_x + self.n_mult]
        prod = (with_one[:, :, None] * mult[:, None, :]).reshape(s.shape[0], -1)
        return np.hstack([mono, prod]) if self.plain else prod

    @property
    def width(self):
        return 1 + int(self.keep.sum())

    def design(self, s):
        raw = self._raw(s)
        cols = (raw[:, self.keep] - self.mean[self.keep]) / self.std[self.keep]
        return np.hstack([np.ones((s.shape[0], 1)), cols])


def ridge_solve(F, y, ridge):
    """Least squares with a ridge on every column but the intercept (column 0)."""
    A = F.T @ F
    rhs = F.T @ y
    if ridge > 0:
        reg = np.full(A.shape[0], ridge)
        reg[0] = 0.0
        A = A + np.diag(reg)
    try:
        if ridge == 0:
            cond = np.linalg.cond(A)
            if not np.isfinite(cond) or cond > 1e13:
                raise np.linalg.LinAlgError("singular design")
        beta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise RegressionError(
            "rank-deficient regression design; use a positive ridge or a lower degree",
            columns=int(F.shape[1]),
            samples=int(F.shape[0]),
        ) from None
    return beta


@dataclass
class StepFit:
    """Fitted continuation value (and ``Z``) at one grid node."""

    fmap: FeatureMap
    beta: np.ndarray
    z_beta: Optional[np.ndarray] = None  # (width, d)

    def __call__(self, s):
        return self.fmap.design(np.atleast_2d(s)) @ self.beta

    def z(self, s):
        return self.fmap.design(np.atleast_2d(s)) @ self.z_beta


@dataclass
class BackwardBundle:
    """``Y``: ``(n+1, S)``; ``Z``: ``(n, S, d)``; ``H``: ``(n, S, K)``."""

    Y: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    fits: List[StepFit]
    terminal: Callable = field(repr=False, default=None)
    fvals: Optional[np.ndarray] = field(repr=False, default=None)  # (n, S) driver values

    def pathwise_estimate(self, dW, comp, dt):
        """Per-sample control-variate estimate of ``Y_0``.

        ``Y_n + sum f dt - sum Z dW - sum H (count - w dt)``; its mean is
        unbiased for ``Y_0`` and its spread gives the Monte Carlo error.
        """
        n = self.Z.shape[0]
        out = self.Y[n].copy()
        if self.fvals is not None:
            out += dt * self.fvals.sum(axis=0)
        out -= np.einsum("isl,isl->s", self.Z, dW[:n])
        if self.H.shape[2]:
            out -= np.einsum("isk,isk->s", self.H, comp[:n])
        return out

    def continuation(self, i):
        """``V_i`` as a function of the sample state (``g`` at the last node)."""
        return self.terminal if i == len(self.fits) else self.fits[i]

    def value_fns(self):
        return [self.continuation(i) for i in range(len(self.fits) + 1)]

    def z_fns(self):
        return [f.z for f in self.fits]

    def to_csv(self, path):
        n, S = self.Z.shape[:2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "sample", "Y"] + [f"Z{j}" for j in range(self.Z.shape[2])]
                       + [f"H{k}" for k in range(self.H.shape[2])])
            for i in range(n + 1):
                for p in range(S):
                    z = self.Z[i, p] if i < n else np.full(self.Z.shape[2], np.nan)
                    h = self.H[i, p] if i < n else np.full(self.H.shape[2], np.nan)
                    w.writerow([i, p, repr(float(self.Y[i, p]))] + [repr(float(v)) for v in z]
                               + [repr(float(v)) for v in h])

    def coefficient_table(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "index", "coefficient"])
            for i, fit in enumerate(self.fits):
                for j, c in enumerate(fit.beta):
                    w.writerow([i, j, repr(float(c))])


def _finite_or_raise(arr, what, i):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what} at step {i}", step=int(i))


def backward_engine(states, diff_incr, jump_incr, dW, comp, dt, terminal, driver, basis,
                    n_x, n_mult=0, plain=True):
    """Run the regression recursion on flattened sample states.

    ``states``: ``(n+1, S, m)``, ``diff_incr``: ``(n, S, m)``, ``jump_incr``:
    ``(n, S, K, m)``, ``dW``: ``(n, S, d)``, ``comp``: ``(n, S, K)`` (counts
    minus ``w dt``).  ``terminal(S_n)`` gives ``Y_n``; ``driver(i, S_i, y, z)``
    returns ``f`` per sample or ``None`` for a zero driver.
    """
    n, S = diff_incr.shape[:2]
    d, K = dW.shape[2], comp.shape[2]
    Y = np.empty((n + 1, S))
    Z = np.empty((n, S, d))
    H = np.empty((n, S, K))
    fits: list = [None] * n
    fvals = np.zeros((n, S))
    Y[n] = terminal(states[n])
    _finite_or_raise(Y[n], "terminal value", n)
    ridge = basis.ridge_for(S)
    nxt = terminal
    for i in range(n - 1, -1, -1):
        s = states[i]
        fmap = FeatureMap(s, n_x, basis.degree, n_mult, plain)
        Phi = fmap.design(s)
        w = Phi.shape[1]
        # jumps
        base = nxt(s)
        for k in range(K):
            H[i, :, k] = nxt(s + jump_incr[i, :, k]) - base
        # Z from the dW-interacted fit of the diffusion innovation
        innov = Y[i + 1] - nxt(states[i + 1] - diff_incr[i])
        Fz = np.hstack([Phi] + [Phi * dW[i, :, l : l + 1] for l in range(d)])
        gam = ridge_solve(Fz, innov, ridge)
        z_beta = gam[w:].reshape(d, w).T
        Z[i] = Phi @ z_beta
        # Y with one explicit pass through the driver
        explicit = Y[i + 1] - np.einsum("sl,sl->s", Z[i], dW[i]) - np.einsum("sk,sk->s", H[i], comp[i])
        beta = ridge_solve(Phi, explicit, ridge)
        if driver is not None:
            y0 = Phi @ beta
            fval = driver(i, s, y0, Z[i])
            if fval is not None:
                fvals[i] = fval
                beta = ridge_solve(Phi, explicit + fval * dt, ridge)
        Y[i] = Phi @ beta
        _finite_or_raise(Y[i], "value fit", i)
        _finite_or_raise(Z[i], "Z fit", i)
        fits[i] = StepFit(fmap, beta, z_beta)
        nxt = fits[i]
    return BackwardBundle(Y, Z, H, fits, terminal, fvals)


def solve_backward(coeffs, paths, noise, grid, basis=None):
    """BSDE along simulated forward paths; state features are ``X`` only."""
    basis = basis or RegressionBasis()
    n = grid.steps
    if paths.n != n or noise.N != paths.P or noise.dW.shape[0] < n:
        raise StructuralError("paths, noise and grid are inconsistent")
    flow, times = paths.flow, grid.times
    cloud_T = flow[n]

    def terminal(s):
        return np.asarray(coeffs.g(s, cloud_T), float)

    def driver(i, s, y, z):
        return np.asarray(coeffs.f(times[i], s, flow[i], y, z), float)

    comp = noise.counts[:n] - noise.jump_weights * grid.dt
    return backward_engine(
        paths.states, paths.diff_incr, paths.jump_disp, noise.dW[:n], comp, grid.dt,
        terminal, driver, basis, n_x=coeffs.dim,
    )


def norm_theta(paths, bundle, jump, grid):
    """Monte Carlo estimate of ``E[sup|X|^2 + sup|Y|^2 + int|Z|^2 + int sum_k w_k |H_k|^2]``."""
    sx = np.max(np.sum(paths.states**2, axis=2), axis=0)
    sy = np.max(bundle.Y**2, axis=0)
    iz = grid.dt * np.sum(np.sum(bundle.Z**2, axis=2), axis=0)
    ih = grid.dt * np.sum(np.sum(bundle.H**2 * jump.weights, axis=2), axis=0) if jump.K else 0.0
    return float(np.mean(sx + sy + iz + ih))
