import dataclasses
import warnings

import numpy as np
import pytest

from jumpfield import families
from jumpfield.drivers import TimeGrid
from jumpfield.errors import NonContractionError, StructuralError
from jumpfield.model import InitialLaw, ProblemSpec
from jumpfield.picard import (
    ContractionWarning,
    continuity_probe,
    contraction_probe,
    picard_solve,
    pinned_solve,
)


def test_decoupled_converges_in_two_iterations(spec_A, grid10, tmp_path):
    sol = picard_solve(spec_A, grid10, 2000, 1)
    d = sol.diagnostics
    assert d.converged and d.iterations == 2 and d.ratios == [0.0]
    d.to_csv(tmp_path / "d.csv")
    assert "ratio" in (tmp_path / "d.csv").read_text()
    assert d.apriori_C > 0 and d.I0sq > 0


def test_coupled_contracts():
    coeffs = families.family_coupled(horizon=0.1, slope=0.5)
    spec = ProblemSpec(coeffs, 0.1, InitialLaw.point([0.0]))
    grid = TimeGrid(0.0, 0.1, 10)
    sol = picard_solve(spec, grid, 4000, 3)
    assert sol.diagnostics.converged
    assert max(sol.diagnostics.ratios) < 0.5
    assert max(contraction_probe(spec, grid, 2000, 3, pairs=3)) < 1


def test_non_contraction_detected():
    # linear feedback b = 3y on a long horizon amplifies every Picard difference
    coeffs = dataclasses.replace(families.family_coupled(), b=lambda t, x, cloud, y, z: 3.0 * y[:, None])
    spec = ProblemSpec(coeffs, 2.0, InitialLaw.point([1.0]))
    grid = TimeGrid(0.0, 2.0, 8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ContractionWarning)
        with pytest.raises(NonContractionError):
            picard_solve(spec, grid, 500, 0, max_iter=6, check_certificate=False)


def test_rejects_bad_tolerance(spec_A, grid10):
    with pytest.raises(StructuralError):
        picard_solve(spec_A, grid10, 10, 0, tol=0.0)


def test_pinned_matches_flow_on_coupled_family():
    coeffs = families.family_coupled(horizon=0.1)
    spec = ProblemSpec(coeffs, 0.1, InitialLaw.point([0.0]))
    grid = TimeGrid(0.0, 0.1, 20)
    ps = pinned_solve(spec, grid, [0.0], np.zeros((1, 1)), 5000, 7)
    # every particle starts at the pin point, so both systems coincide in law
    assert ps.value == pytest.approx(float(ps.flow.solution.backward.Y[0].mean()), abs=2e-3)


def test_continuity_probe_on_B(spec_B, grid10):
    rows = continuity_probe(spec_B, grid10, 2000, 1, perturbations=[{"dx": 0.2}, {"mu_shift": 0.1}])
    assert [round(r.quotient, 6) for r in rows] == [1.0, 1.0]
    assert rows[1].w2 == pytest.approx(0.1)
