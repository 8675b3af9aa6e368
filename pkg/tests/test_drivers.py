import math

import numpy as np
import pytest

from jumpfield.drivers import (
    NoiseBundle,
    TimeGrid,
    compensated_integral_check,
    poisson_cdf,
    sample_noise,
    stream_key,
)
from jumpfield.errors import StructuralError
from jumpfield.model import JumpMeasure

JUMP = JumpMeasure.from_atoms([(1.0, 1.0)])


def test_time_grid():
    g = TimeGrid(0.0, 0.25, 5)
    assert g.dt == pytest.approx(0.05)
    assert g.times[-1] == 0.25 and g.index_of(0.1) == 2
    sub = g.sub_grid(0.1)
    assert sub.steps == 3 and sub.dt == pytest.approx(0.05)
    with pytest.raises(StructuralError):
        g.index_of(0.07)
    with pytest.raises(StructuralError):
        TimeGrid(1.0, 0.5, 3)


def test_poisson_cdf_table():
    cdf = poisson_cdf(0.3)
    assert cdf[-1] == 1.0
    assert cdf[0] == pytest.approx(math.exp(-0.3))
    assert poisson_cdf(0.0).tolist() == [1.0]


def test_noise_moments():
    grid = TimeGrid(0.0, 0.25, 25)
    nb = sample_noise(grid, JUMP, 40_000, 11, dim=2)
    n_obs = nb.dW[..., 0].size
    var = nb.dW.var() / grid.dt
    assert abs(var - 1) < 3 * math.sqrt(2 / (2 * n_obs))
    m = grid.dt
    assert abs(nb.counts.mean() - m) < 3 * math.sqrt(m / nb.counts.size)
    # independence of the two Brownian coordinates
    assert abs(np.mean(nb.dW[..., 0] * nb.dW[..., 1]) / grid.dt) < 3 / math.sqrt(n_obs)


def test_compensated_integral_mean():
    grid = TimeGrid(0.0, 0.25, 50)
    nb = sample_noise(grid, JUMP, 100_000, 2)
    val = compensated_integral_check(nb, JUMP)
    assert abs(val) <= 3 * math.sqrt(0.25 / 100_000)


def test_compensated_check_rejects_other_measure():
    grid = TimeGrid(0.0, 0.25, 5)
    nb = sample_noise(grid, JUMP, 10, 0)
    with pytest.raises(StructuralError):
        compensated_integral_check(nb, JumpMeasure.from_atoms([(1.0, 2.0)]))


def test_seed_determinism_and_streams():
    grid = TimeGrid(0.0, 0.25, 10)
    a = sample_noise(grid, JUMP, 1000, 5, threads=1)
    b = sample_noise(grid, JUMP, 1000, 5, threads=3)
    assert a.identical(b)
    assert not a.identical(sample_noise(grid, JUMP, 1000, 6))
    assert not a.identical(sample_noise(grid, JUMP, 1000, 5, stream="pinned"))
    assert stream_key(5, "mv") != stream_key(5, "pinned")


def test_step_offset_extends_bundle():
    grid = TimeGrid(0.0, 0.5, 10)
    full = sample_noise(grid, JUMP, 100, 1)
    tail = sample_noise(TimeGrid(0.25, 0.5, 5), JUMP, 100, 1, step0=5)
    assert np.array_equal(full.dW[5:], tail.dW)
    assert np.array_equal(full.counts[5:], tail.counts)


def test_prefix_particles_agree():
    grid = TimeGrid(0.0, 0.25, 4)
    small = sample_noise(grid, JUMP, 10, 3)
    big = sample_noise(grid, JUMP, 30, 3)
    assert np.array_equal(small.dW, big.dW[:, :10])


def test_dump_roundtrip(tmp_path):
    grid = TimeGrid(0.0, 0.25, 4)
    nb = sample_noise(grid, JUMP, 20, 9, dim=2)
    path = tmp_path / "noise.bin"
    nb.dump(path)
    again = NoiseBundle.load(path)
    assert again.identical(nb) and again.dW.shape == (4, 20, 2)
    with pytest.raises(StructuralError):
        NoiseBundle.from_bytes(b"XXXX" + path.read_bytes()[4:])


def test_empty_jump_measure_has_no_counts():
    nb = sample_noise(TimeGrid(0.0, 1.0, 3), JumpMeasure.from_atoms([]), 5, 0)
    assert nb.counts.shape == (3, 5, 0)
