import dataclasses

import numpy as np
import pytest

from jumpfield import families
from jumpfield.drivers import TimeGrid
from jumpfield.errors import CapabilityError, StructuralError
from jumpfield.model import Derivatives, InitialLaw, ProblemSpec
from jumpfield.oracle import BenchmarkFamily
from jumpfield.picard import pinned_solve
from jumpfield.sensitivity import (
    fd_dv_dmu,
    fd_hessian_x,
    solve_dmu,
    solve_dx,
    write_sensitivity_csv,
)


def _base(spec, x=0.0, M=3000, steps=10, seed=1):
    grid = TimeGrid(0.0, spec.horizon, steps)
    d = spec.coeffs.dim
    return pinned_solve(spec, grid, np.full(d, x), np.zeros((1, d)), M, seed)


def test_dx_benchmark_A():
    res = solve_dx(_base(BenchmarkFamily("A").spec()))
    assert res.value[0] == pytest.approx(1.0, abs=0.02)
    assert np.allclose(res.dX[0], np.eye(1))


def test_dx_initial_identity_in_2d():
    res = solve_dx(_base(BenchmarkFamily("A", dim=2).spec(), M=1000))
    assert res.dX.shape == (11, 1000, 2, 2)
    assert np.allclose(res.dX[0], np.eye(2))
    assert np.allclose(res.value, [0.5, 0.5], atol=0.01)


def test_dx_constant_terminal_is_zero():
    coeffs = dataclasses.replace(
        families.family_A(), g=lambda x, cloud: np.ones(x.shape[0]),
        derivatives=Derivatives(g_x=lambda x, cloud: np.zeros(x.shape)),
    )
    res = solve_dx(_base(ProblemSpec(coeffs, 0.25, InitialLaw.point([0.0]))))
    assert np.allclose(res.dY, 0) and np.allclose(res.dZ, 0) and np.allclose(res.dH, 0)


def test_dx_benchmark_C():
    res = solve_dx(_base(BenchmarkFamily("C", kappa=0.5).spec(), steps=25))
    assert res.value[0] == pytest.approx(np.exp(0.125), abs=0.02)


def test_dmu_benchmark_B():
    base = _base(BenchmarkFamily("B").spec())
    for v in (-1.0, 0.0, 2.0):
        res = solve_dmu(base, v=[v])
        assert res.value[0] == pytest.approx(1.0, abs=0.05)
        assert np.allclose(res.dX[0], 0.0)


def test_dmu_without_measure_dependence_is_zero():
    res = solve_dmu(_base(BenchmarkFamily("A").spec()), v=[0.3])
    assert np.all(res.value == 0) and np.all(res.dY == 0) and np.all(res.cloud_dX == 0)


def test_dmu_is_linear_in_the_measure_derivative():
    one = solve_dmu(_base(BenchmarkFamily("B", scale=1.0).spec()), v=[0.5]).value[0]
    two = solve_dmu(_base(BenchmarkFamily("B", scale=2.0).spec()), v=[0.5]).value[0]
    assert two == pytest.approx(2 * one, rel=0.02)


def test_dmu_rejects_wrong_probe_dimension():
    with pytest.raises(StructuralError):
        solve_dmu(_base(BenchmarkFamily("B").spec(), M=200), v=[0.0, 1.0])


def test_missing_derivatives_is_capability_error():
    coeffs = dataclasses.replace(families.family_B(), derivatives=None)
    base = _base(ProblemSpec(coeffs, 0.25, InitialLaw.point([0.0])), M=400)
    with pytest.raises(CapabilityError):
        solve_dx(base)
    with pytest.raises(CapabilityError):
        solve_dmu(base, v=[0.0])


def test_finite_difference_fallback():
    coeffs = dataclasses.replace(families.family_B(), derivatives=None)
    base = _base(ProblemSpec(coeffs, 0.25, InitialLaw.point([0.0])), M=400, steps=4)
    assert solve_dx(base, allow_fd=True).value[0] == pytest.approx(1.0, abs=1e-4)
    assert solve_dmu(base, v=[0.5], allow_fd=True, average_limit=8).value[0] == pytest.approx(1.0, abs=1e-3)


class _Quadratic:
    def value(self, t, x, cloud):
        return float(np.sum(np.asarray(x) ** 2))


def test_fd_hessian_quadratic_field():
    H = fd_hessian_x(_Quadratic(), 0.0, [0.3, -1.0], None, eps=1e-2)
    assert np.allclose(H, 2 * np.eye(2), atol=1e-6)
    with pytest.raises(StructuralError):
        fd_hessian_x(_Quadratic(), 0.0, [0.0], None, eps=0.0)


def test_fd_dv_dmu_Q_and_B():
    q = fd_dv_dmu(_base(BenchmarkFamily("Q").spec()), v=[0.5], eps=1e-2)
    assert q[0, 0] == pytest.approx(2.0, rel=0.1)
    b = fd_dv_dmu(_base(BenchmarkFamily("B").spec()), v=[0.5], eps=1e-2)
    assert abs(b[0, 0]) < 1e-6
    with pytest.raises(StructuralError):
        fd_dv_dmu(_base(BenchmarkFamily("B").spec(), M=100), v=[0.0], eps=-1.0)


def test_sensitivity_csv(tmp_path):
    write_sensitivity_csv(tmp_path / "s.csv", [(0.0, "0.5", "dY_dmu", 0, 1.0, 0.0)])
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "t,v,quantity,component,value,stderr"
