import dataclasses

import numpy as np
import pytest

from jumpfield import families
from jumpfield.errors import CapabilityError, StructuralError
from jumpfield.master import residual
from jumpfield.measure import ParticleCloud
from jumpfield.model import InitialLaw, ProblemSpec
from jumpfield.oracle import BenchmarkFamily, ClosedFormField, brute_force_V, closed_form_V

DELTA0 = np.zeros((1, 1))


def test_closed_form_examples():
    assert closed_form_V(BenchmarkFamily("A"), 0.25, [0.7], DELTA0) == pytest.approx(0.7)
    assert closed_form_V(BenchmarkFamily("A"), 0.0, [0.0], DELTA0) == pytest.approx(0.25)
    assert closed_form_V(BenchmarkFamily("C", kappa=0.5), 0.0, [1.0], DELTA0) == pytest.approx(1.4164356, abs=1e-7)
    assert closed_form_V(BenchmarkFamily("B"), 0.0, [0.0], DELTA0) == pytest.approx(0.5)


def test_unknown_family():
    with pytest.raises(StructuralError):
        BenchmarkFamily("Z")
    with pytest.raises(CapabilityError):
        ClosedFormField(ProblemSpec(families.family_coupled(), 0.1, InitialLaw.point([0.0])))


@pytest.mark.parametrize("fid", ["A", "B", "C", "Q"])
def test_closed_form_satisfies_master_equation(fid):
    cf = ClosedFormField(BenchmarkFamily(fid).spec())
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        t = rng.uniform(0, 0.25)
        x = rng.normal(size=1)
        cloud = ParticleCloud(rng.normal(size=(int(rng.integers(1, 6)), 1)))
        worst = max(worst, abs(residual(cf, cf, t, x, cloud).total))
    assert worst <= 1e-10


@pytest.mark.parametrize("fid", ["A", "B", "C", "Q"])
def test_closed_form_derivatives_match_fd(fid):
    cf = ClosedFormField(BenchmarkFamily(fid).spec())
    rng = np.random.default_rng(1)
    h = 1e-5
    for _ in range(20):
        t, x = rng.uniform(0.01, 0.24), rng.normal(size=1)
        cloud = ParticleCloud(rng.normal(size=(4, 1)))
        dt = (cf.value(t + h, x, cloud) - cf.value(t - h, x, cloud)) / (2 * h)
        assert cf.time_derivative(t, x, cloud) == pytest.approx(dt, abs=1e-8)
        dx = (cf.value(t, x + h, cloud) - cf.value(t, x - h, cloud)) / (2 * h)
        assert cf.grad_x(t, x, cloud)[0] == pytest.approx(dx, abs=1e-8)
        # Lions derivative: move one atom, scale by the cloud size
        bump = h * (np.arange(4) == 2)[:, None]
        dmu = cloud.N * (cf.value(t, x, cloud.points + bump) - cf.value(t, x, cloud.points - bump)) / (2 * h)
        assert cf.lions(t, x, cloud, cloud.points[2])[0] == pytest.approx(dmu, abs=1e-8)
        v = cloud.points[2]
        dv = (cf.lions(t, x, cloud, v + h)[0] - cf.lions(t, x, cloud, v - h)[0]) / (2 * h)
        assert cf.dv_lions(t, x, cloud, v)[0, 0] == pytest.approx(dv, abs=1e-8)
        ld = (cf.linear_derivative(t, x, cloud, v + h) - cf.linear_derivative(t, x, cloud, v - h)) / (2 * h)
        assert ld == pytest.approx(cf.lions(t, x, cloud, v)[0], abs=1e-8)


def test_linear_derivative_is_normalised():
    cf = ClosedFormField(BenchmarkFamily("Q").spec())
    cloud = ParticleCloud(np.array([[0.0], [1.0], [-2.0]]))
    vals = [cf.linear_derivative(0.1, [0.0], cloud, p) for p in cloud.points]
    assert np.mean(vals) == pytest.approx(0.0, abs=1e-14)


def test_brute_force_constant_terminal():
    coeffs = dataclasses.replace(families.family_A(), g=lambda x, cloud: np.ones(x.shape[0]))
    v, se = brute_force_V(ProblemSpec(coeffs, 0.25, InitialLaw.point([0.0])), 0.0, [0.0], DELTA0, paths=1000)
    assert v == 1.0 and se == 0.0


@pytest.mark.parametrize("fid", ["A", "B"])
def test_brute_force_matches_closed_form(fid):
    fam = BenchmarkFamily(fid)
    v, se = brute_force_V(fam, 0.0, [0.0], DELTA0, paths=100_000, seed=3)
    assert abs(v - closed_form_V(fam, 0.0, [0.0], DELTA0)) <= 3 * se


def test_brute_force_driver_scope():
    coeffs = dataclasses.replace(families.family_A(), f=lambda t, x, cloud, y, z: y**2)
    with pytest.raises(CapabilityError):
        brute_force_V(ProblemSpec(coeffs, 0.25, InitialLaw.point([0.0])), 0.0, [0.0], DELTA0, paths=10)
    with pytest.raises(CapabilityError):
        brute_force_V(ProblemSpec(families.family_coupled(), 0.1, InitialLaw.point([0.0])), 0.0, [0.0], DELTA0)


def test_brute_force_detects_linear_custom_driver():
    coeffs = dataclasses.replace(families.family_A(), f=lambda t, x, cloud, y, z: 0.5 * y)
    spec = ProblemSpec(coeffs, 0.25, InitialLaw.point([0.0]))
    v, se = brute_force_V(spec, 0.0, [1.0], DELTA0, paths=50_000)
    assert abs(v - np.exp(0.125) * 1.25) <= 3 * se
