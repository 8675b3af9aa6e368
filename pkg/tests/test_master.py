import threading

import numpy as np
import pytest

from jumpfield.drivers import TimeGrid
from jumpfield.errors import StructuralError
from jumpfield.master import (
    TERMS,
    DecouplingField,
    PerturbedField,
    flow_consistency,
    residual,
    sample_pairs,
    write_residual_csv,
    write_residual_json,
)
from jumpfield.measure import ParticleCloud
from jumpfield.oracle import BenchmarkFamily, ClosedFormField
from jumpfield.picard import picard_solve

DELTA0 = ParticleCloud(np.zeros((1, 1)))


def _field(fid, N=4000, steps=10, **kw):
    spec = BenchmarkFamily(fid, **kw).spec()
    return DecouplingField(spec, TimeGrid(0.0, spec.horizon, steps), N=N, M=N, seed=3)


def test_terminal_value_exact():
    fld = _field("B")
    cloud = ParticleCloud(np.array([[1.0], [2.0]]))
    v, se = fld.eval_V(0.25, [0.3], cloud)
    assert v == 0.3 + 1.5 and se == 0.0


def test_values_on_benchmarks():
    assert _field("A").eval_V(0.0, [0.0], DELTA0)[0] == pytest.approx(0.25, abs=0.01)
    assert _field("B", N=20000).eval_V(0.0, [0.0], DELTA0)[0] == pytest.approx(0.5, abs=0.02)


def test_cache_coherent_and_thread_safe():
    fld = _field("B", N=2000)
    first = fld.eval_V(0.1, [0.2], DELTA0)
    out = []
    threads = [threading.Thread(target=lambda: out.append(fld.eval_V(0.1, [0.2], DELTA0))) for _ in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert all(o == first for o in out)
    fresh = _field("B", N=2000).eval_V(0.1, [0.2], DELTA0)
    assert fresh == first


def test_time_outside_interval():
    with pytest.raises(StructuralError):
        _field("A").eval_V(0.3, [0.0], DELTA0)


def test_linear_derivative_benchmark_B():
    fld = _field("B", N=2000)
    cloud = ParticleCloud(np.array([[-1.0], [0.0], [2.0]]))
    mean = cloud.mean[0]
    for y in (-0.5, 1.0, 3.0):
        got = fld.eval_linear_derivative(0.0, [0.0], cloud, [y], normalized=True)
        assert got == pytest.approx(y - mean, abs=0.05)
    # jump difference: the normalisation constant cancels
    assert fld.linear_derivative_diff(0.0, [0.0], cloud, [1.5], [0.5]) == pytest.approx(1.0, abs=0.05)


def test_linear_derivative_without_measure_dependence():
    fld = _field("A", N=2000)
    assert fld.eval_linear_derivative(0.0, [0.0], DELTA0, [2.0]) == pytest.approx(0.0, abs=1e-6)


def test_time_regularity_A():
    fld = _field("A")
    ts = [0.0, 0.05, 0.1, 0.15, 0.2]
    vals = [fld.value(t, [0.0], DELTA0) for t in ts]
    q = np.abs(np.diff(vals)) / 0.05
    assert np.all(np.abs(q - 1.0) <= 0.1)


def test_residual_report_benchmark_B_terms():
    fld = DecouplingField(BenchmarkFamily("B").spec(), TimeGrid(0.0, 0.25, 5), N=200_000, M=5000, seed=7)
    rep = residual(fld, None, 0.0, [0.0], DELTA0)
    want = {"time": -2.0, "x_jump": 1.0, "measure_jump": 1.0}
    for name in TERMS:
        assert rep.terms[name] == pytest.approx(want.get(name, 0.0), abs=0.05)
    assert abs(rep.total) <= 0.05
    assert rep.total == pytest.approx(sum(rep.terms.values()), abs=1e-12)


def test_residual_detects_perturbation():
    fld = DecouplingField(BenchmarkFamily("A").spec(), TimeGrid(0.0, 0.25, 5), N=2000, M=2000, seed=7)
    assert residual(PerturbedField(fld, 0.2), None, 0.1, [0.0], DELTA0).total == pytest.approx(-0.2, abs=0.05)


def test_residual_with_closed_form_sensitivities(tmp_path):
    spec = BenchmarkFamily("C").spec()
    grid = TimeGrid(0.0, 0.25, 5)
    fld = DecouplingField(spec, grid, N=2000, M=2000, seed=7)
    rep = residual(fld, ClosedFormField(spec, grid), 0.1, [0.5], DELTA0)
    assert abs(rep.total) <= 0.05
    write_residual_csv(tmp_path / "r.csv", [rep])
    write_residual_json(tmp_path / "r.json", [rep])
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 1 + len(TERMS) + 1


def test_flow_consistency_A_and_terminal():
    spec = BenchmarkFamily("A").spec()
    grid = TimeGrid(0.0, 0.25, 10)
    sol = picard_solve(spec, grid, 3000, 1)
    fld = DecouplingField(spec, grid, N=3000, M=3000, seed=2)
    dev, tol, rows = flow_consistency(fld, sol, sample_pairs(3000, 10, 5, 0))
    assert dev <= 0.03 and len(rows) == 5
    dev_T, _, _ = flow_consistency(fld, sol, [(0, 10), (5, 10)])
    assert dev_T == pytest.approx(0.0, abs=1e-12)
