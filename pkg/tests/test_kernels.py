import itertools

import numpy as np
import pytest

from jumpfield import kernels

needs_compiled = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled kernels not built")


@needs_compiled
def test_uniform_cube_backends_bit_identical():
    a = kernels.uniform_cube(12345, 3, 4, 257, 5, backend="compiled")
    b = kernels.uniform_cube(12345, 3, 4, 257, 5, backend="python")
    assert a.tobytes() == b.tobytes()


def test_uniform_cube_independent_of_threads():
    one = kernels.uniform_cube(99, 0, 3, 1001, 4, threads=1)
    many = kernels.uniform_cube(99, 0, 3, 1001, 4, threads=4)
    assert one.tobytes() == many.tobytes()


def test_uniform_cube_range_and_offset():
    u = kernels.uniform_cube(7, 0, 6, 50, 3)
    assert np.all((u > 0) & (u < 1))
    # step offsets index the same stream
    tail = kernels.uniform_cube(7, 2, 4, 50, 3)
    assert np.array_equal(u[2:], tail)


def test_uniform_moments():
    u = kernels.uniform_cube(1, 0, 1, 200_000, 1).ravel()
    assert abs(u.mean() - 0.5) < 3 * np.sqrt(1 / 12 / u.size)


def _brute_assignment(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


@pytest.mark.parametrize("backend", ["python", pytest.param("compiled", marks=needs_compiled)])
def test_hungarian_matches_brute_force(backend):
    rng = np.random.default_rng(3)
    for n in range(1, 7):
        cost = rng.uniform(size=(n, n))
        perm = kernels.hungarian(cost, backend=backend)
        assert sorted(perm.tolist()) == list(range(n))
        assert cost[np.arange(n), perm].sum() == pytest.approx(_brute_assignment(cost), abs=1e-12)


@needs_compiled
def test_hungarian_backends_agree():
    rng = np.random.default_rng(5)
    cost = rng.uniform(size=(40, 40))
    a = kernels.hungarian(cost, backend="python")
    b = kernels.hungarian(cost, backend="compiled")
    assert cost[np.arange(40), a].sum() == pytest.approx(cost[np.arange(40), b].sum(), abs=1e-12)


@needs_compiled
def test_greedy_backends_agree():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    assert np.array_equal(kernels.greedy_match(a, b, backend="python"), kernels.greedy_match(a, b, backend="compiled"))


def test_hungarian_rejects_rectangular():
    with pytest.raises(ValueError):
        kernels.hungarian(np.zeros((2, 3)))
