"""Problem data: coefficient maps, jump intensity, Lipschitz certificates.

Coefficients are vectorised over particles.  With ``P`` evaluation points in
``R^d`` the call conventions are::

    b(t, x[P,d], cloud, y[P], z[P,d])          -> [P,d]
    sigma(t, x[P,d], cloud, y[P])              -> [P,d,d]
    h(t, x[P,d], cloud, y[P], mark)            -> [P,d]
    f(t, x[P,d], cloud, y[P], z[P,d])          -> [P]
    g(x[P,d], cloud)                           -> [P]

``cloud`` is a :class:`~jumpfield.measure.ParticleCloud` standing in for the
measure argument.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from jumpfield import kernels
from jumpfield.errors import EvaluationError, StructuralError
from jumpfield.measure import ParticleCloud, wasserstein2


@dataclass(frozen=True)
class JumpMeasure:
    """Finite atomic intensity measure on the mark space."""

    marks: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.asarray(self.marks, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if m.shape[0] != w.shape[0]:
            raise StructuralError("one weight per mark is required")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise StructuralError("atom weights must be finite and positive")
        m.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "marks", m)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, atoms):
        atoms = list(atoms)
        if not atoms:
            return cls.empty()
        return cls(np.array([np.atleast_1d(a[0]) for a in atoms], float), [a[1] for a in atoms])

    @classmethod
    def empty(cls, mark_dim=1):
        return cls(np.zeros((0, mark_dim)), np.zeros(0))

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def total_mass(self):
        return float(math.fsum(self.weights))

    def mark_key(self, k):
        return tuple(float(v) for v in self.marks[k])

    def atoms(self):
        return [(self.marks[k].copy(), float(self.weights[k])) for k in range(self.K)]

    def to_dict(self):
        return {"atoms": [[self.marks[k].tolist(), float(self.weights[k])] for k in range(self.K)]}


@dataclass(frozen=True)
class LipschitzCertificate:
    L: float
    gamma: float
    M: float
    Ltheta: dict = field(default_factory=dict)

    def for_jump(self, jump):
        return np.array([self.Ltheta[jump.mark_key(k)] for k in range(jump.K)], float)


@dataclass
class ValidationReport:
    passed: bool
    violations: list


def validate_certificate(cert, jump):
    """Check the standing assumptions a certificate declares against ``jump``."""
    keys = {jump.mark_key(k) for k in range(jump.K)}
    table = {tuple(np.atleast_1d(np.asarray(k, float)).tolist()): v for k, v in cert.Ltheta.items()}
    if set(table) != keys:
        raise StructuralError(
            "per-mark Lipschitz table does not match the jump atoms",
            missing=[list(k) for k in keys - set(table)],
            extra=[list(k) for k in set(table) - keys],
        )
    violations = []
    for name in ("L", "M"):
        if not getattr(cert, name) >= 0:
            violations.append(f"{name} = {getattr(cert, name)} is negative")
    if not cert.gamma > 0:
        violations.append(f"gamma = {cert.gamma} must be positive")
    for key, value in sorted(table.items()):
        if not value >= 0:
            violations.append(f"L(theta={list(key)}) = {value} is negative")
    if not violations:
        lt = np.array([table[jump.mark_key(k)] for k in range(jump.K)])
        integral = float(np.sum(np.expm1(cert.gamma * lt) * jump.weights))
        if not integral <= cert.L:
            violations.append(
                f"sum (exp(gamma L(theta)) - 1) w = {integral:.6g} exceeds L = {cert.L:.6g}"
            )
    return ValidationReport(not violations, violations)


@dataclass(frozen=True)
class Derivatives:
    """Closed-form first derivatives of the coefficients.

    A field left as ``None`` is taken to be identically zero.  Index order is
    Jacobian order (output first).  Measure derivatives receive particle
    arguments shaped ``[P, 1, ...]`` and the probe ``v`` shaped ``[1, Q, d]``
    and return arrays broadcastable to ``[P, Q, ...]``.
    """

    b_x: Optional[Callable] = None  # [P,d,d]
    b_y: Optional[Callable] = None  # [P,d]
    b_z: Optional[Callable] = None  # [P,d,d]
    sigma_x: Optional[Callable] = None  # [P,d,d,d]  (j, l, k)
    sigma_y: Optional[Callable] = None  # [P,d,d]
    h_x: Optional[Callable] = None  # [P,d,d]
    h_y: Optional[Callable] = None  # [P,d]
    f_x: Optional[Callable] = None  # [P,d]
    f_y: Optional[Callable] = None  # [P]
    f_z: Optional[Callable] = None  # [P,d]
    g_x: Optional[Callable] = None  # [P,d]
    b_mu: Optional[Callable] = None  # [P,Q,d,d]
    sigma_mu: Optional[Callable] = None  # [P,Q,d,d,d]
    h_mu: Optional[Callable] = None  # [P,Q,d,d]
    f_mu: Optional[Callable] = None  # [P,Q,d]
    g_mu: Optional[Callable] = None  # [P,Q,d]


@dataclass(frozen=True)
class CoefficientSet:
    b: Callable
    sigma: Callable
    h: Callable
    f: Callable
    g: Callable
    cert: LipschitzCertificate
    jump: JumpMeasure
    dim: int = 1
    derivatives: Optional[Derivatives] = None
    # True when b, sigma, h ignore (y, z): the forward flow is then feedback-free.
    decoupled: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def jump_increments(self, t, x, cloud, y):
        """``[K, P, d]`` displacement for one jump of each atom from state ``x``."""
        if self.jump.K == 0:
            return np.zeros((0,) + x.shape)
        return np.stack([self.h(t, x, cloud, y, self.jump.marks[k]) for k in range(self.jump.K)])


@dataclass(frozen=True)
class InitialLaw:
    """Law of the initial state: point mass, Gaussian, or an explicit atom list."""

    kind: str
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    atoms: Optional[np.ndarray] = None

    @classmethod
    def point(cls, x):
        return cls("point", mean=np.atleast_1d(np.asarray(x, float)))

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, float))
        return cls("gaussian", mean=mean, cov=np.atleast_2d(np.asarray(cov, float)))

    @classmethod
    def from_atoms(cls, atoms):
        a = np.asarray(atoms, float)
        return cls("atoms", atoms=a[:, None] if a.ndim == 1 else a)

    @property
    def dim(self):
        return (self.atoms.shape[1] if self.kind == "atoms" else self.mean.shape[0])

    def sample(self, n, seed):
        """Initial particles; Gaussian draws come from the per-particle lattice.

        An atom list returns ``N0 * ceil(n / N0)`` particles so that the
        empirical law matches the atoms exactly.
        """
        d = self.dim
        if self.kind == "point":
            return np.tile(self.mean, (n, 1))
        if self.kind == "atoms":
            # every atom gets the same particle count, so n is rounded up
            return ParticleCloud(self.atoms).replicate(n)
        if self.kind == "gaussian":
            from jumpfield.drivers import stream_key, normals_from_uniforms

            u = kernels.uniform_cube(stream_key(seed, "init"), 0, 1, n, 2 * d)[0]
            z = normals_from_uniforms(u, d)
            chol = np.linalg.cholesky(self.cov)
            return self.mean + z @ chol.T
        raise StructuralError(f"unknown initial law kind {self.kind!r}")

    def second_moment(self):
        if self.kind == "point":
            return float(self.mean @ self.mean)
        if self.kind == "gaussian":
            return float(self.mean @ self.mean + np.trace(self.cov))
        return float(np.mean(np.sum(self.atoms**2, axis=1)))

    def to_dict(self):
        if self.kind == "point":
            return {"kind": "point", "x": self.mean.tolist()}
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}
        return {"kind": "atoms", "atoms": self.atoms.tolist()}

    @classmethod
    def from_dict(cls, data):
        kind = data.get("kind")
        if kind == "point":
            return cls.point(data["x"])
        if kind == "gaussian":
            return cls.gaussian(data["mean"], data["cov"])
        if kind == "atoms":
            return cls.from_atoms(data["atoms"])
        raise StructuralError(f"unknown initial law kind {kind!r}")


@dataclass(frozen=True)
class ProblemSpec:
    coeffs: CoefficientSet
    horizon: float
    initial_law: InitialLaw
    pin: Optional[tuple] = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise StructuralError("horizon must be positive", horizon=self.horizon)
        if self.initial_law.dim != self.coeffs.dim:
            raise StructuralError("initial law and coefficients disagree on dimension")

    def to_dict(self):
        if self.coeffs.name == "custom":
            raise StructuralError("only built-in coefficient families serialise to JSON")
        out = {
            "family": self.coeffs.name,
            "params": dict(self.coeffs.params),
            "jump": self.coeffs.jump.to_dict(),
            "horizon": self.horizon,
            "initial_law": self.initial_law.to_dict(),
        }
        if self.pin is not None:
            out["pin"] = {"t": float(self.pin[0]), "x": np.atleast_1d(self.pin[1]).tolist()}
        return out

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, data):
        from jumpfield import families

        jump = None
        if "jump" in data:
            jump = JumpMeasure.from_atoms(data["jump"].get("atoms", []))
        horizon = float(data["horizon"])
        coeffs = families.build(data["family"], horizon=horizon, jump=jump, **data.get("params", {}))
        law = InitialLaw.from_dict(data["initial_law"])
        pin = None
        if data.get("pin") is not None:
            pin = (float(data["pin"]["t"]), np.asarray(data["pin"]["x"], float))
        return cls(coeffs, horizon, law, pin)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class RandomProbeConfig:
    pairs: int = 200
    radius: float = 2.0
    cloud_size: int = 8
    seed: int = 0
    horizon: float = 1.0


@dataclass
class ProbeReport:
    quotients: dict
    declared: dict
    flagged: list

    @property
    def passed(self):
        return not self.flagged


def _finite(name, value, **inputs):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        echo = {k: np.asarray(v).tolist() for k, v in inputs.items()}
        raise EvaluationError(f"{name} returned a non-finite value", coefficient=name, inputs=echo)
    return value


def probe_lipschitz(coeffs, config=None):
    """Largest empirical difference quotients over random probe pairs.

    Each quotient divides the change in a coefficient by the summed changes of
    its arguments (``|dx| + W2 + |dy| + |dz|``).  A coefficient is flagged
    when its quotient exceeds the declared constant by more than 1%.
    """
    config = config or RandomProbeConfig()
    rng = np.random.default_rng(config.seed)
    d, R = coeffs.dim, config.radius
    names = ["b", "sigma", "f", "g"] + [f"h[{k}]" for k in range(coeffs.jump.K)]
    best = dict.fromkeys(names, 0.0)
    lt = coeffs.cert.for_jump(coeffs.jump) if coeffs.jump.K else np.zeros(0)
    for _ in range(config.pairs):
        t = rng.uniform(0, config.horizon)
        x = rng.uniform(-R, R, size=(2, d))
        y = rng.uniform(-R, R, size=2)
        z = rng.uniform(-R, R, size=(2, d))
        clouds = [ParticleCloud(rng.uniform(-R, R, size=(config.cloud_size, d))) for _ in range(2)]
        if rng.random() < 0.25:
            x[1] = x[0]
        if rng.random() < 0.25:
            clouds[1] = clouds[0]
        w2 = float(wasserstein2(clouds[0], clouds[1]))
        dx = float(np.linalg.norm(x[0] - x[1]))
        dy, dz = abs(y[0] - y[1]), float(np.linalg.norm(z[0] - z[1]))

        def pair(name, fn, *args_per_side):
            vals = []
            for s in range(2):
                args = [a[s] for a in args_per_side]
                vals.append(_finite(name, fn(*args), t=t, x=x[s], y=y[s], z=z[s]))
            return np.linalg.norm(vals[0] - vals[1])

        xs = [x[s][None, :] for s in range(2)]
        ys = [np.array([y[s]]) for s in range(2)]
        zs = [z[s][None, :] for s in range(2)]
        ts = [t, t]
        denom_bfz = dx + w2 + dy + dz
        denom_sh = dx + w2 + dy
        denom_g = dx + w2
        if denom_bfz > 0:
            best["b"] = max(best["b"], pair("b", coeffs.b, ts, xs, clouds, ys, zs) / denom_bfz)
            best["f"] = max(best["f"], pair("f", coeffs.f, ts, xs, clouds, ys, zs) / denom_bfz)
        if denom_sh > 0:
            best["sigma"] = max(best["sigma"], pair("sigma", coeffs.sigma, ts, xs, clouds, ys) / denom_sh)
            for k in range(coeffs.jump.K):
                mk = [coeffs.jump.marks[k]] * 2
                q = pair(f"h[{k}]", coeffs.h, ts, xs, clouds, ys, mk) / denom_sh
                best[f"h[{k}]"] = max(best[f"h[{k}]"], q)
        if denom_g > 0:
            best["g"] = max(best["g"], pair("g", coeffs.g, xs, clouds) / denom_g)
    declared = {n: coeffs.cert.L for n in ("b", "sigma", "f", "g")}
    declared.update({f"h[{k}]": float(lt[k]) for k in range(coeffs.jump.K)})
    flagged = [n for n in names if best[n] > declared[n] * 1.01 + 1e-12]
    return ProbeReport(best, declared, flagged)
