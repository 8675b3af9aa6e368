import dataclasses
import json

import numpy as np
import pytest

from jumpfield import families
from jumpfield.errors import EvaluationError, StructuralError
from jumpfield.model import (
    InitialLaw,
    JumpMeasure,
    LipschitzCertificate,
    ProblemSpec,
    RandomProbeConfig,
    probe_lipschitz,
    validate_certificate,
)


def test_jump_measure_validation():
    jm = JumpMeasure.from_atoms([(1.0, 0.5), (-2.0, 1.5)])
    assert jm.K == 2 and jm.total_mass == 2.0
    with pytest.raises(StructuralError):
        JumpMeasure.from_atoms([(1.0, 0.0)])
    with pytest.raises(StructuralError):
        JumpMeasure(np.zeros((2, 1)), [1.0])
    assert JumpMeasure.from_atoms([]).K == 0


def test_certificate_integral_condition():
    jm = JumpMeasure.from_atoms([(1.0, 1.0)])
    ok = LipschitzCertificate(L=1.0, gamma=1.0, M=1.0, Ltheta={(1.0,): 0.5})
    assert validate_certificate(ok, jm).passed  # e^0.5 - 1 = 0.6487 <= 1
    bad = LipschitzCertificate(L=0.5, gamma=1.0, M=1.0, Ltheta={(1.0,): 0.5})
    rep = validate_certificate(bad, jm)
    assert not rep.passed and "exceeds" in rep.violations[0]


def test_certificate_mark_table_mismatch():
    jm = JumpMeasure.from_atoms([(1.0, 1.0)])
    cert = LipschitzCertificate(L=1.0, gamma=1.0, M=1.0, Ltheta={(2.0,): 0.0})
    with pytest.raises(StructuralError):
        validate_certificate(cert, jm)


@pytest.mark.parametrize("name", ["A", "B", "C", "Q", "coupled"])
def test_builtin_certificates_hold_and_probe_clean(name):
    coeffs = families.build(name)
    assert validate_certificate(coeffs.cert, coeffs.jump).passed
    # Q is only locally Lipschitz: probe inside the certified ball
    cfg = RandomProbeConfig(pairs=100, radius=1.0 if name == "Q" else 2.0)
    assert probe_lipschitz(coeffs, cfg).passed


def test_probe_flags_understated_constant():
    coeffs = families.family_A()
    lying = dataclasses.replace(coeffs, cert=dataclasses.replace(coeffs.cert, L=0.1))
    rep = probe_lipschitz(lying, RandomProbeConfig(pairs=50))
    assert "g" in rep.flagged


def test_probe_reports_nonfinite():
    coeffs = families.family_A()
    broken = dataclasses.replace(coeffs, g=lambda x, cloud: np.full(x.shape[0], np.nan))
    with pytest.raises(EvaluationError):
        probe_lipschitz(broken, RandomProbeConfig(pairs=3))


def test_spec_json_roundtrip():
    spec = ProblemSpec(families.family_C(kappa=0.3), 0.25, InitialLaw.gaussian([0.0], [[0.5]]), pin=(0.0, [1.0]))
    again = ProblemSpec.from_json(spec.to_json())
    assert json.loads(again.to_json()) == json.loads(spec.to_json())
    assert again.coeffs.params["kappa"] == 0.3


def test_spec_dimension_mismatch():
    with pytest.raises(StructuralError):
        ProblemSpec(families.family_A(dim=2), 0.25, InitialLaw.point([0.0]))


def test_initial_law_sampling():
    g = InitialLaw.gaussian([1.0], [[4.0]])
    x = g.sample(50_000, 3)
    assert abs(x.mean() - 1.0) < 3 * 2 / np.sqrt(50_000)
    assert np.array_equal(x, g.sample(50_000, 3))
    atoms = InitialLaw.from_atoms([[0.0], [1.0], [2.0]])
    assert atoms.sample(7, 0).shape == (9, 1)
    assert atoms.second_moment() == pytest.approx(5 / 3)


def test_unknown_family():
    with pytest.raises(StructuralError):
        families.build("Z")
    with pytest.raises(StructuralError):
        families.build("A", kappa=1.0)


def test_jump_increments_shape():
    coeffs = families.family_B(dim=2, jump=JumpMeasure.from_atoms([(1.0, 1.0), (-0.5, 2.0)]))
    x = np.zeros((4, 2))
    inc = coeffs.jump_increments(0.0, x, None, np.zeros(4))
    assert inc.shape == (2, 4, 2) and np.allclose(inc[1], -0.5)
