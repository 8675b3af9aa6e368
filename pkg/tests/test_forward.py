import dataclasses

import numpy as np
import pytest

from jumpfield import families
from jumpfield.drivers import TimeGrid, sample_noise
from jumpfield.errors import DivergenceError, StructuralError
from jumpfield.forward import FeedbackProcesses, simulate_mv, simulate_pinned
from jumpfield.model import InitialLaw, ProblemSpec


def _spec(coeffs, T=0.25):
    return ProblemSpec(coeffs, T, InitialLaw.point(np.zeros(coeffs.dim)))


def test_benchmark_A_moments(grid10):
    spec = _spec(families.family_A())
    noise = sample_noise(grid10, spec.coeffs.jump, 50_000, 1)
    paths = simulate_mv(spec, FeedbackProcesses.zeros(10, 50_000, 1), noise, grid10)
    xT = paths.states[-1, :, 0]
    # E X_T = c lam T, Var X_T = T + c^2 lam T
    assert abs(xT.mean() - 0.25) < 3 * np.sqrt(0.5 / 50_000)
    assert xT.var() == pytest.approx(0.5, rel=0.03)


def test_state_equation_is_reproduced_from_increments(grid10):
    spec = _spec(families.family_B())
    noise = sample_noise(grid10, spec.coeffs.jump, 100, 4)
    paths = simulate_mv(spec, FeedbackProcesses.zeros(10, 100, 1), noise, grid10)
    jumps = np.einsum("npk,npkd->npd", noise.counts.astype(float), paths.jump_disp)
    rebuilt = paths.states[0] + np.cumsum(paths.diff_incr + jumps, axis=0)
    assert np.allclose(rebuilt, paths.states[1:], atol=1e-13)


def test_pinned_copies_start_at_x(grid10):
    spec = _spec(families.family_A())
    noise = sample_noise(grid10, spec.coeffs.jump, 64, 2)
    flow = simulate_mv(spec, FeedbackProcesses.zeros(10, 64, 1), noise, grid10).flow
    pn = sample_noise(grid10, spec.coeffs.jump, 32, 2, stream="pinned")
    pinned = simulate_pinned(spec, flow, FeedbackProcesses.zeros(10, 32, 1), pn, grid10, [0.7])
    assert np.all(pinned.states[0] == 0.7) and pinned.pinned
    with pytest.raises(StructuralError):
        simulate_pinned(spec, flow, FeedbackProcesses.zeros(10, 32, 1), pn, grid10, [0.7, 1.0])


def test_divergence_names_step_and_particle(grid10):
    coeffs = families.family_A()
    blowup = dataclasses.replace(coeffs, b=lambda t, x, cloud, y, z: np.where(x > 0.2, np.inf, 0.0))
    spec = _spec(blowup)
    noise = sample_noise(grid10, coeffs.jump, 50, 0)
    with pytest.raises(DivergenceError) as info:
        simulate_mv(spec, FeedbackProcesses.zeros(10, 50, 1), noise, grid10)
    assert {"step", "particle"} <= set(info.value.payload)


def test_feedback_shape_checks():
    with pytest.raises(StructuralError):
        FeedbackProcesses.path(np.zeros((3, 4)), np.zeros((3, 4, 1)))
    with pytest.raises(StructuralError):
        FeedbackProcesses("other")


def test_paths_csv(tmp_path, grid10):
    spec = _spec(families.family_A())
    noise = sample_noise(grid10, spec.coeffs.jump, 5, 0)
    paths = simulate_mv(spec, FeedbackProcesses.zeros(10, 5, 1), noise, grid10)
    paths.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == 1 + 11 * 5
