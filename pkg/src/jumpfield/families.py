"""Built-in coefficient families with closed-form certificates and derivatives.

Every family uses the jump displacement ``h = c * theta`` (applied to each
coordinate) and the intensity ``nu = {(1, lam)}`` unless an explicit jump
measure is passed.  ``avg`` below is the coordinate average, so in one
dimension it is the identity.

======== ========================================== =========================
family   coefficients                               value field
======== ========================================== =========================
A        b=0, sigma=I, f=0, g=avg(x)                avg(x) + a tau
B        as A with g=avg(x) + s avg(mean(mu))       avg(x) + s avg(m) + (1+s) a tau
C        as A with f=kappa y                        exp(kappa tau)(avg(x) + a tau)
Q        b=0, sigma=0, f=0, g=x + int y^2 dmu       see :mod:`jumpfield.oracle`
coupled  b=slope tanh(y), sigma=1, f=0, g=x         no closed form
======== ========================================== =========================

Here ``tau = T - t`` and ``a = c * sum(theta_k w_k)`` is the jump drift.
"""

from __future__ import annotations

import math

import numpy as np

from jumpfield.errors import StructuralError
from jumpfield.model import CoefficientSet, Derivatives, JumpMeasure, LipschitzCertificate

GAMMA = 1.0


def default_jump(c=1.0, lam=1.0):
    del c
    return JumpMeasure.from_atoms([(1.0, lam)] if lam > 0 else [])


def _zeros_vec(d):
    return lambda t, x, cloud, *rest: np.zeros((x.shape[0], d))


def _identity_sigma(d, scale=1.0):
    eye = scale * np.eye(d)
    return lambda t, x, cloud, y: np.broadcast_to(eye, (x.shape[0], d, d)).copy()


def _jump_h(c, d):
    def h(t, x, cloud, y, mark):
        theta = float(np.asarray(mark).reshape(-1)[0])
        return np.full((x.shape[0], d), c * theta)

    return h


def _zero_scalar(t, x, cloud, y, z):
    return np.zeros(x.shape[0])


def _avg_x(x):
    return x.mean(axis=1)


def _certificate(jump, c, d, L, extra_M=0.0):
    """Certificate for ``h = c theta`` (constant in x, so ``L(theta) = 0``)."""
    marks = {jump.mark_key(k): 0.0 for k in range(jump.K)}
    jump_bound = sum(
        w * math.expm1(GAMMA * abs(c * m[0]) * math.sqrt(d)) for m, w in jump.atoms()
    )
    return LipschitzCertificate(L=float(L), gamma=GAMMA, M=float(jump_bound + extra_M), Ltheta=marks)


def _check_dim(dim):
    dim = int(dim)
    if dim < 1:
        raise StructuralError("dimension must be at least 1", dim=dim)
    return dim


def family_A(horizon=0.25, c=1.0, lam=1.0, dim=1, jump=None):
    d = _check_dim(dim)
    jump = jump if jump is not None else default_jump(c, lam)
    deriv = Derivatives(g_x=lambda x, cloud: np.full(x.shape, 1.0 / d))
    return CoefficientSet(
        b=_zeros_vec(d),
        sigma=_identity_sigma(d),
        h=_jump_h(c, d),
        f=_zero_scalar,
        g=lambda x, cloud: _avg_x(x),
        cert=_certificate(jump, c, d, 1.0, extra_M=math.sqrt(d)),
        jump=jump,
        dim=d,
        derivatives=deriv,
        decoupled=True,
        name="A",
        params={"c": c, "lam": lam, "dim": d},
    )


def family_B(horizon=0.25, c=1.0, lam=1.0, dim=1, scale=1.0, jump=None):
    d = _check_dim(dim)
    jump = jump if jump is not None else default_jump(c, lam)

    def g(x, cloud):
        return _avg_x(x) + scale * float(np.mean(cloud.mean))

    def g_mu(x, cloud, v):
        return np.full(np.broadcast_shapes(x.shape[:-1], v.shape[:-1]) + (d,), scale / d)

    deriv = Derivatives(g_x=lambda x, cloud: np.full(x.shape, 1.0 / d), g_mu=g_mu)
    return CoefficientSet(
        b=_zeros_vec(d),
        sigma=_identity_sigma(d),
        h=_jump_h(c, d),
        f=_zero_scalar,
        g=g,
        cert=_certificate(jump, c, d, max(1.0, abs(scale)), extra_M=math.sqrt(d)),
        jump=jump,
        dim=d,
        derivatives=deriv,
        decoupled=True,
        name="B",
        params={"c": c, "lam": lam, "dim": d, "scale": scale},
    )


def family_C(horizon=0.25, c=1.0, lam=1.0, dim=1, kappa=0.5, jump=None):
    d = _check_dim(dim)
    jump = jump if jump is not None else default_jump(c, lam)
    deriv = Derivatives(
        g_x=lambda x, cloud: np.full(x.shape, 1.0 / d),
        f_y=lambda t, x, cloud, y, z: np.full(x.shape[0], kappa),
    )
    return CoefficientSet(
        b=_zeros_vec(d),
        sigma=_identity_sigma(d),
        h=_jump_h(c, d),
        f=lambda t, x, cloud, y, z: kappa * y,
        g=lambda x, cloud: _avg_x(x),
        cert=_certificate(jump, c, d, max(1.0, abs(kappa)), extra_M=math.sqrt(d)),
        jump=jump,
        dim=d,
        derivatives=deriv,
        decoupled=True,
        name="C",
        params={"c": c, "lam": lam, "dim": d, "kappa": kappa},
    )


def family_Q(horizon=0.25, c=1.0, lam=1.0, radius=2.0, jump=None):
    """Pure-jump family with a quadratic measure dependence in the terminal value.

    ``g`` is only locally Lipschitz; the certificate is valid on the ball of
    the given ``radius`` (the probe domain), where ``|d int y^2| <= 2R W2``.
    """
    jump = jump if jump is not None else default_jump(c, lam)

    def g(x, cloud):
        return x[:, 0] + cloud.second_moment

    def g_mu(x, cloud, v):
        return np.broadcast_to(2.0 * v, np.broadcast_shapes(x.shape[:-1], v.shape[:-1]) + (1,)).copy()

    deriv = Derivatives(g_x=lambda x, cloud: np.ones(x.shape), g_mu=g_mu)
    return CoefficientSet(
        b=_zeros_vec(1),
        sigma=_identity_sigma(1, 0.0),
        h=_jump_h(c, 1),
        f=_zero_scalar,
        g=g,
        cert=_certificate(jump, c, 1, max(1.0, 2.0 * radius)),
        jump=jump,
        dim=1,
        derivatives=deriv,
        decoupled=True,
        name="Q",
        params={"c": c, "lam": lam, "radius": radius},
    )


def family_coupled(horizon=0.1, c=1.0, lam=1.0, slope=0.5, jump=None):
    """Forward drift fed back from the value process: ``b = slope * tanh(y)``."""
    jump = jump if jump is not None else default_jump(c, lam)

    def b(t, x, cloud, y, z):
        return slope * np.tanh(y)[:, None]

    def b_y(t, x, cloud, y, z):
        return (slope / np.cosh(y) ** 2)[:, None]

    deriv = Derivatives(g_x=lambda x, cloud: np.ones(x.shape), b_y=b_y)
    return CoefficientSet(
        b=b,
        sigma=_identity_sigma(1),
        h=_jump_h(c, 1),
        f=_zero_scalar,
        g=lambda x, cloud: x[:, 0].copy(),
        cert=_certificate(jump, c, 1, max(1.0, abs(slope)), extra_M=1.0),
        jump=jump,
        dim=1,
        derivatives=deriv,
        decoupled=False,
        name="coupled",
        params={"c": c, "lam": lam, "slope": slope},
    )


FAMILIES = {
    "A": family_A,
    "B": family_B,
    "C": family_C,
    "Q": family_Q,
    "coupled": family_coupled,
}


def build(name, horizon=None, jump=None, **params):
    try:
        factory = FAMILIES[name]
    except KeyError:
        raise StructuralError(f"unknown family {name!r}", known=sorted(FAMILIES)) from None
    if horizon is not None:
        params["horizon"] = horizon
    try:
        return factory(jump=jump, **params)
    except TypeError as exc:
        raise StructuralError(f"bad parameters for family {name}: {exc}") from None


def jump_drift(coeffs):
    """``a = c * sum(theta_k w_k)`` for a built-in family."""
    c = coeffs.params.get("c", 1.0)
    return float(c * np.sum(coeffs.jump.marks[:, 0] * coeffs.jump.weights)) if coeffs.jump.K else 0.0


def jump_second(coeffs):
    c = coeffs.params.get("c", 1.0)
    return float(c * c * np.sum(coeffs.jump.marks[:, 0] ** 2 * coeffs.jump.weights)) if coeffs.jump.K else 0.0
