import dataclasses

import numpy as np
import pytest

from jumpfield import families
from jumpfield.backward import FeatureMap, RegressionBasis, norm_theta, ridge_solve, solve_backward
from jumpfield.drivers import TimeGrid, sample_noise
from jumpfield.errors import RegressionError, StructuralError
from jumpfield.forward import FeedbackProcesses, simulate_mv
from jumpfield.model import InitialLaw, ProblemSpec


def _solve(coeffs, N=4000, steps=10, seed=1, basis=None, x0=None):
    grid = TimeGrid(0.0, 0.25, steps)
    law = InitialLaw.gaussian(np.zeros(coeffs.dim), np.eye(coeffs.dim)) if x0 is None else InitialLaw.point(x0)
    spec = ProblemSpec(coeffs, 0.25, law)
    noise = sample_noise(grid, coeffs.jump, N, seed, dim=coeffs.dim)
    paths = simulate_mv(spec, FeedbackProcesses.zeros(steps, N, coeffs.dim), noise, grid)
    return paths, solve_backward(coeffs, paths, noise, grid, basis), noise, grid


def test_benchmark_A_processes():
    # Y = X + c lam (T - t), Z = 1, H = c
    paths, bundle, _, grid = _solve(families.family_A())
    tau = grid.T - grid.times
    assert np.allclose(bundle.Y, paths.states[..., 0] + tau[:, None], atol=1e-6)
    assert np.allclose(bundle.Z, 1.0, atol=1e-6)
    assert np.allclose(bundle.H, 1.0, atol=1e-6)


def test_benchmark_C_linear_driver():
    paths, bundle, _, grid = _solve(families.family_C(kappa=0.5), steps=25)
    tau = grid.T - grid.times
    exact = np.exp(0.5 * tau)[:, None] * (paths.states[..., 0] + tau[:, None])
    assert np.max(np.abs(bundle.Y - exact)) < 0.01


def test_constant_terminal_gives_zero_processes():
    coeffs = dataclasses.replace(families.family_A(), g=lambda x, cloud: np.full(x.shape[0], 3.0))
    _, bundle, _, _ = _solve(coeffs)
    assert np.allclose(bundle.Y, 3.0, atol=1e-10)
    assert np.allclose(bundle.Z, 0.0, atol=1e-10) and np.allclose(bundle.H, 0.0, atol=1e-10)


def test_pathwise_estimate_recovers_value():
    _, bundle, noise, grid = _solve(families.family_A(), x0=[0.0])
    comp = noise.counts - noise.jump_weights * grid.dt
    est = bundle.pathwise_estimate(noise.dW, comp, grid.dt)
    assert est.mean() == pytest.approx(0.25, abs=1e-6)


def test_ridge_zero_on_singular_design_raises():
    F = np.ones((10, 2))
    with pytest.raises(RegressionError):
        ridge_solve(F, np.arange(10.0), 0.0)


def test_ridge_solve_exact_fit():
    rng = np.random.default_rng(0)
    F = np.hstack([np.ones((50, 1)), rng.normal(size=(50, 2))])
    beta = np.array([1.0, -2.0, 0.5])
    assert np.allclose(ridge_solve(F, F @ beta, 0.0), beta)


def test_feature_map_drops_constant_columns():
    x = np.zeros((20, 1))
    fm = FeatureMap(x, 1, 3)
    assert fm.design(x).shape[1] == 1


def test_basis_validation():
    with pytest.raises(StructuralError):
        RegressionBasis(kind="splines")


def test_exports(tmp_path):
    paths, bundle, _, grid = _solve(families.family_A(), N=200, steps=4)
    bundle.to_csv(tmp_path / "b.csv")
    bundle.coefficient_table(tmp_path / "coef.csv")
    assert (tmp_path / "b.csv").read_text().count("\n") > 4
    assert norm_theta(paths, bundle, families.family_A().jump, grid) > 0
