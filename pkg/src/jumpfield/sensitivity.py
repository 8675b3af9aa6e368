"""First-order derivative systems along a solved base, and FD second derivatives.

Both derivative systems are linear FBSDEs with coefficients frozen along the
base paths.  They share one solver: the forward part carries a Jacobian-like
multiplier ``D`` of shape ``(d, dd)`` per sample (``dd`` directions), and the
backward part runs the regression engine on flattened ``(sample, direction)``
states ``[X, D[:, j], j]`` with features ``poly(X) * D``.

* x-derivative: ``D_0 = I``, no measure sources.
* measure derivative at ``v``: ``D_0 = 0``, with sources averaging the
  measure derivatives of the coefficients against (a) copies started at
  ``v`` weighted by their x-Jacobians and (b) the base cloud weighted by the
  cloud-level solution.  The averages over the independent copy are realised
  on particle subsamples of the existing clouds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from jumpfield.backward import RegressionBasis, backward_engine
from jumpfield.errors import CapabilityError, StructuralError
from jumpfield.measure import bump_add_atom
from jumpfield.model import Derivatives

_MU_FIELDS = ("b_mu", "sigma_mu", "h_mu", "f_mu", "g_mu")
_FWD_FEEDBACK = ("b_y", "b_z", "sigma_y", "h_y")


@dataclass
class DxBundle:
    """``dX``: ``(n+1, M, d, d)`` with ``dX[i, m, a, j] = dX_a / dx_j``.

    ``dY``: ``(n+1, M, d)``, ``dZ``: ``(n, M, d, d)`` indexed ``[.., j, l]``,
    ``dH``: ``(n, M, K, d)``.  ``value`` is the copy mean of ``dY`` at the
    first node, an estimate of the spatial gradient of the value field.
    """

    dX: np.ndarray
    dY: np.ndarray
    dZ: np.ndarray
    dH: np.ndarray
    value: np.ndarray
    stderr: np.ndarray


@dataclass
class DmuBundle:
    """Measure-derivative solution at probe ``v``.

    ``cloud_dX`` is the cloud-level multiplier ``(n+1, N, d, d)``; the
    ``d*`` arrays belong to the pinned copies.  ``value[a]`` estimates the
    Lions derivative component ``a`` at ``v``.
    """

    v: np.ndarray
    cloud_dX: np.ndarray
    dX: np.ndarray
    dY: np.ndarray
    dZ: np.ndarray
    dH: np.ndarray
    value: np.ndarray
    stderr: np.ndarray


@dataclass
class _Linear:
    D: np.ndarray
    dY: np.ndarray
    dZ: np.ndarray
    dH: np.ndarray
    stderr: np.ndarray


def resolve_derivatives(coeffs, allow_fd=False):
    if coeffs.derivatives is not None:
        return coeffs.derivatives
    if not allow_fd:
        raise CapabilityError(
            "coefficient derivatives are not available; supply Derivatives or pass allow_fd=True",
            family=coeffs.name,
        )
    return fd_derivatives(coeffs)


def _call(fn, *args):
    return None if fn is None else np.asarray(fn(*args), dtype=float)


def _stride_index(n, limit):
    stride = max(1, -(-n // limit))
    return np.arange(0, n, stride)


class _Sources:
    """Averages of coefficient measure derivatives against weighted particle sets.

    Each set is ``(points(i) -> (Q, d), weights(i) -> (Q, d, dd))``.
    """

    def __init__(self, deriv, coeffs, sets, times, flow, chunk_budget=2_000_000):
        self.deriv, self.coeffs, self.sets = deriv, coeffs, sets
        self.times, self.flow = times, flow
        self.budget = chunk_budget

    def active(self, name):
        return getattr(self.deriv, name) is not None and bool(self.sets)

    def _avg(self, evaluate, x, per_q, i):
        """``mean_q evaluate(x[chunk], pts) . weights`` summed over the sets."""
        total = None
        for pts_fn, w_fn in self.sets:
            pts, w = pts_fn(i), w_fn(i)
            Q = pts.shape[0]
            chunk = max(1, self.budget // max(1, Q * per_q))
            parts = []
            for lo in range(0, x.shape[0], chunk):
                sl = slice(lo, lo + chunk)
                parts.append(evaluate(sl, pts, w) / Q)
            out = np.concatenate(parts)
            total = out if total is None else total + out
        return total

    def step_terms(self, i, x, y, z):
        d = self.coeffs.dim
        t, cloud = self.times[i], self.flow[i]
        dv = self.deriv
        terms = {}
        if self.active("b_mu"):
            terms["b"] = self._avg(
                lambda sl, pts, w: np.einsum(
                    "pqak,qkj->paj",
                    np.broadcast_to(dv.b_mu(t, x[sl, None], cloud, y[sl, None], z[sl, None], pts[None]),
                                    (x[sl].shape[0], pts.shape[0], d, d)),
                    w),
                x, d * d, i)
        if self.active("sigma_mu"):
            terms["sigma"] = self._avg(
                lambda sl, pts, w: np.einsum(
                    "pqalk,qkj->palj",
                    np.broadcast_to(dv.sigma_mu(t, x[sl, None], cloud, y[sl, None], pts[None]),
                                    (x[sl].shape[0], pts.shape[0], d, d, d)),
                    w),
                x, d * d * d, i)
        if self.active("h_mu"):
            terms["h"] = [
                self._avg(
                    lambda sl, pts, w, mk=self.coeffs.jump.marks[k]: np.einsum(
                        "pqak,qkj->paj",
                        np.broadcast_to(dv.h_mu(t, x[sl, None], cloud, y[sl, None], mk, pts[None]),
                                        (x[sl].shape[0], pts.shape[0], d, d)),
                        w),
                    x, d * d, i)
                for k in range(self.coeffs.jump.K)
            ]
        if self.active("f_mu"):
            terms["f"] = self._avg(
                lambda sl, pts, w: np.einsum(
                    "pqk,qkj->pj",
                    np.broadcast_to(dv.f_mu(t, x[sl, None], cloud, y[sl, None], z[sl, None], pts[None]),
                                    (x[sl].shape[0], pts.shape[0], d)),
                    w),
                x, d, i)
        return terms

    def terminal(self, x, n):
        if not self.active("g_mu"):
            return None
        d, cloud = self.coeffs.dim, self.flow[n]
        return self._avg(
            lambda sl, pts, w: np.einsum(
                "pqk,qkj->pj",
                np.broadcast_to(self.deriv.g_mu(x[sl, None], cloud, pts[None]),
                                (x[sl].shape[0], pts.shape[0], d)),
                w),
            x, d, n)


def _flatten(arr, dd):
    """``(T, P, dd, ...)`` -> ``(T, P*dd, ...)``."""
    return arr.reshape(arr.shape[0], arr.shape[1] * dd, *arr.shape[3:])


def _linear_system(coeffs, deriv, paths, Y, Z, noise, flow, basis, D0, sources=None,
                   with_backward=True, max_iter=15, tol=1e-12, D_out=None):
    grid = paths.grid
    n, P, d = paths.n, paths.P, paths.dim
    dd = D0.shape[2]
    K = coeffs.jump.K
    times, dt = grid.times, grid.dt
    dW = noise.dW[:n]
    counts = noise.counts[:n].astype(float)
    comp = counts - noise.jump_weights * dt
    feedback = any(getattr(deriv, f) is not None for f in _FWD_FEEDBACK)

    # coefficient derivatives along the base, cached per step
    cache = []
    for i in range(n):
        x, cl, y, z, t = paths.states[i], flow[i], Y[i], Z[i], times[i]
        hx = [_call(deriv.h_x, t, x, cl, y, coeffs.jump.marks[k]) for k in range(K)]
        hy = [_call(deriv.h_y, t, x, cl, y, coeffs.jump.marks[k]) for k in range(K)]
        cache.append(dict(
            bx=_call(deriv.b_x, t, x, cl, y, z), by=_call(deriv.b_y, t, x, cl, y, z),
            bz=_call(deriv.b_z, t, x, cl, y, z), sx=_call(deriv.sigma_x, t, x, cl, y),
            sy=_call(deriv.sigma_y, t, x, cl, y), hx=hx, hy=hy,
            fx=_call(deriv.f_x, t, x, cl, y, z), fy=_call(deriv.f_y, t, x, cl, y, z),
            fz=_call(deriv.f_z, t, x, cl, y, z),
        ))

    dY = np.zeros((n + 1, P, dd))
    dZ = np.zeros((n, P, dd, d))
    # D_out lets self-interaction sources read the multiplier while it is built
    D = D_out if D_out is not None else np.empty((n + 1, P, d, dd))
    prev = None
    bundle = None
    for _ in range(max_iter if feedback else 1):
        D[0] = D0
        diff_D = np.empty((n, P, d, dd))
        jump_D = np.zeros((n, P, K, d, dd))
        src_f = [None] * n
        for i in range(n):
            c, Di = cache[i], D[i]
            src = sources.step_terms(i, paths.states[i], Y[i], Z[i]) if sources else {}
            drift = np.zeros((P, d, dd))
            if c["bx"] is not None:
                drift += np.einsum("pak,pkj->paj", c["bx"], Di)
            if c["by"] is not None:
                drift += c["by"][:, :, None] * dY[i][:, None, :]
            if c["bz"] is not None:
                drift += np.einsum("pak,pjk->paj", c["bz"], dZ[i])
            if "b" in src:
                drift += src["b"]
            step = drift * dt
            if c["sx"] is not None:
                step += np.einsum("palk,pkj,pl->paj", c["sx"], Di, dW[i])
            if c["sy"] is not None:
                step += np.einsum("pal,pl->pa", c["sy"], dW[i])[:, :, None] * dY[i][:, None, :]
            if "sigma" in src:
                step += np.einsum("palj,pl->paj", src["sigma"], dW[i])
            diff_D[i] = step
            for k in range(K):
                if c["hx"][k] is not None:
                    jump_D[i, :, k] += np.einsum("pak,pkj->paj", c["hx"][k], Di)
                if c["hy"][k] is not None:
                    jump_D[i, :, k] += c["hy"][k][:, :, None] * dY[i][:, None, :]
                if "h" in src:
                    jump_D[i, :, k] += src["h"][k]
            src_f[i] = src.get("f")
            D[i + 1] = Di + step + (np.einsum("pk,pkaj->paj", counts[i], jump_D[i]) if K else 0.0)
        if not with_backward:
            break

        # flattened (sample, direction) states [X, D[:, j], j]
        S = P * dd
        jcol = np.tile(np.arange(dd, dtype=float), P)
        Xf = np.repeat(paths.states, dd, axis=1)
        Df = _flatten(np.swapaxes(D, 2, 3), dd)
        states = np.concatenate([Xf, Df, np.broadcast_to(jcol[None, :, None], (n + 1, S, 1))], axis=2)
        diff_incr = np.concatenate(
            [np.repeat(paths.diff_incr, dd, axis=1), _flatten(np.swapaxes(diff_D, 2, 3), dd),
             np.zeros((n, S, 1))], axis=2)
        jx = np.repeat(paths.jump_disp, dd, axis=1)  # (n, S, K, d)
        jd = np.moveaxis(jump_D, 4, 2).reshape(n, S, K, d)
        jump_incr = np.concatenate([jx, jd, np.zeros((n, S, K, 1))], axis=3)
        dWf = np.repeat(dW, dd, axis=1)
        compf = np.repeat(comp, dd, axis=1)
        cloud_T = flow[n]
        rows_T = np.arange(S)

        def terminal(s):
            x, Dj, j = s[:, :d], s[:, d : 2 * d], s[:, 2 * d].astype(int)
            out = np.zeros(s.shape[0])
            if deriv.g_x is not None:
                out += np.einsum("sa,sa->s", np.asarray(deriv.g_x(x, cloud_T), float), Dj)
            if sources is not None:
                g_src = sources.terminal(x, n)
                if g_src is not None:
                    out += g_src[rows_T[: s.shape[0]], j]
            return out

        def driver(i, s, yv, zv):
            c = cache[i]
            if all(c[k] is None for k in ("fx", "fy", "fz")) and src_f[i] is None:
                return None
            Dj = s[:, d : 2 * d]
            out = np.zeros(s.shape[0])
            if c["fx"] is not None:
                out += np.einsum("sa,sa->s", np.repeat(c["fx"], dd, axis=0), Dj)
            if c["fy"] is not None:
                out += np.repeat(np.broadcast_to(c["fy"], (P,)), dd) * yv
            if c["fz"] is not None:
                out += np.einsum("sl,sl->s", np.repeat(c["fz"], dd, axis=0), zv)
            if src_f[i] is not None:
                out += src_f[i].reshape(-1)
            return out

        plain = sources is not None
        bundle = backward_engine(states, diff_incr, jump_incr, dWf, compf, dt, terminal, driver, basis,
                                 n_x=d, n_mult=d, plain=plain)
        dY = bundle.Y.reshape(n + 1, P, dd)
        dZ = bundle.Z.reshape(n, P, dd, d)
        if prev is not None and np.max(np.abs(dY - prev)) <= tol:
            break
        prev = dY.copy()

    if bundle is None:
        dH = np.zeros((n, P, K, dd))
        stderr = np.zeros(dd)
    else:
        dH = np.swapaxes(bundle.H.reshape(n, P, dd, K), 2, 3)
        est = bundle.pathwise_estimate(dWf, compf, dt).reshape(P, dd)
        stderr = est.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.full(dd, np.inf)
    return _Linear(D.copy(), dY, dZ, dH, stderr)


def solve_dx(base, spec=None, grid=None, basis=None, *, allow_fd=False):
    """Variational system in ``x`` along the pinned copies of ``base``."""
    spec = spec or base.flow.spec
    basis = basis or base.flow.basis or RegressionBasis()
    coeffs = spec.coeffs
    deriv = resolve_derivatives(coeffs, allow_fd)
    P, d = base.paths.P, coeffs.dim
    D0 = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    lin = _linear_system(coeffs, deriv, base.paths, base.backward.Y, base.backward.Z, base.noise,
                         base.flow.flow, basis, D0)
    return DxBundle(lin.D, lin.dY, lin.dZ, lin.dH, lin.dY[0].mean(axis=0), lin.stderr)


def solve_dmu(base, spec=None, grid=None, basis=None, v=None, *, copies=None, average_limit=512,
              allow_fd=False, vcopy=None):
    """Lions-derivative system at probe ``v``: cloud-level stage, then pinned stage."""
    from jumpfield.picard import pinned_solve

    spec = spec or base.flow.spec
    basis = basis or base.flow.basis or RegressionBasis()
    coeffs = spec.coeffs
    d = coeffs.dim
    v = np.atleast_1d(np.asarray(v, float))
    if v.shape != (d,):
        raise StructuralError("probe point has the wrong dimension", dim=d)
    deriv = resolve_derivatives(coeffs, allow_fd)
    flow = base.flow
    n, M = base.paths.n, base.paths.P
    N = flow.paths.P
    if all(getattr(deriv, f) is None for f in _MU_FIELDS):
        K = coeffs.jump.K
        return DmuBundle(v, np.zeros((n + 1, N, d, d)), np.zeros((n + 1, M, d, d)),
                         np.zeros((n + 1, M, d)), np.zeros((n, M, d, d)), np.zeros((n, M, K, d)),
                         np.zeros(d), np.zeros(d))

    # copies started at v and their x-Jacobians
    if vcopy is None:
        vcopy = pinned_solve(spec, base.grid, v, None, copies or M, base.seed, basis, flow=flow,
                             stream="vcopy")
    vdx = solve_dx(vcopy, spec, basis=basis, allow_fd=allow_fd)
    iv = _stride_index(vcopy.paths.P, average_limit)
    v_set = (lambda i: vcopy.paths.states[i][iv], lambda i: vdx.dX[i][iv])
    times = base.grid.times

    # cloud-level system (the pinned system with x replaced by the cloud)
    ic = _stride_index(N, average_limit)
    D_cloud = np.zeros((n + 1, N, d, d))
    self_set = (lambda i: flow.paths.states[i][ic], lambda i: D_cloud[i][ic])
    cloud_sources = _Sources(deriv, coeffs, [v_set, self_set], times, flow.flow)
    needs_cloud_backward = any(getattr(deriv, f) is not None for f in _FWD_FEEDBACK)
    forward_sources = any(getattr(deriv, f) is not None for f in ("b_mu", "sigma_mu", "h_mu"))
    if forward_sources:
        if coeffs.decoupled:
            cY, cZ = np.zeros((n + 1, N)), np.zeros((n, N, d))
        else:
            mv_back = flow.backward()
            cY, cZ = mv_back.Y, mv_back.Z
        _linear_system(coeffs, deriv, flow.paths, cY, cZ, flow.noise, flow.flow,
                               basis, np.zeros((N, d, d)), cloud_sources,
                               with_backward=needs_cloud_backward, D_out=D_cloud)

    # pinned system with the cloud-level multiplier as the self-interaction weight
    pinned_sources = _Sources(deriv, coeffs, [v_set, self_set], times, flow.flow)
    lin = _linear_system(coeffs, deriv, base.paths, base.backward.Y, base.backward.Z, base.noise,
                         flow.flow, basis, np.zeros((M, d, d)), pinned_sources)
    return DmuBundle(v, D_cloud, lin.D, lin.dY, lin.dZ, lin.dH, lin.dY[0].mean(axis=0), lin.stderr)


def fd_hessian_x(field, t, x, cloud, eps=1e-2):
    """Symmetrised central second differences of ``field.value`` in ``x``."""
    if not eps > 0:
        raise StructuralError("finite-difference step must be positive", eps=eps)
    x = np.atleast_1d(np.asarray(x, float))
    d = x.shape[0]
    e = np.eye(d) * eps

    def V(p):
        return field.value(t, p, cloud)

    v0 = V(x)
    H = np.empty((d, d))
    for a in range(d):
        H[a, a] = (V(x + e[a]) - 2 * v0 + V(x - e[a])) / eps**2
        for b in range(a):
            H[a, b] = H[b, a] = (
                V(x + e[a] + e[b]) - V(x + e[a] - e[b]) - V(x - e[a] + e[b]) + V(x - e[a] - e[b])
            ) / (4 * eps**2)
    return 0.5 * (H + H.T)


def fd_dv_dmu(base, spec=None, grid=None, basis=None, v=None, eps=1e-2, **kw):
    """Central difference in ``v`` of the Lions derivative: ``out[a, k] = d/dv_k dmuY_a``."""
    if not eps > 0:
        raise StructuralError("finite-difference step must be positive", eps=eps)
    v = np.atleast_1d(np.asarray(v, float))
    d = v.shape[0]
    out = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        up = solve_dmu(base, spec, grid, basis, v + e, **kw).value
        dn = solve_dmu(base, spec, grid, basis, v - e, **kw).value
        out[:, k] = (up - dn) / (2 * eps)
    return out


def write_sensitivity_csv(path, rows):
    """Rows of ``(t, v, quantity, component, value, stderr)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "v", "quantity", "component", "value", "stderr"])
        for r in rows:
            w.writerow(r)


def fd_derivatives(coeffs, eps=1e-5, mu_eps=1e-4):
    """Central-difference stand-ins for every coefficient derivative.

    Measure derivatives differentiate the bumped-cloud estimator
    ``(N+1) [U(mu + atom at v) - U(mu + atom at reference)]`` in ``v``;
    the reference term cancels in the difference.  Costly: one coefficient
    call per probe point and direction.
    """
    d = coeffs.dim

    def grad(fn, arg, shape_out):
        def wrapped(*args):
            args = list(args)
            base = np.asarray(args[arg], float)
            cols = []
            width = base.shape[-1] if base.ndim > 1 else 1
            for k in range(width):
                up, dn = base.copy(), base.copy()
                if base.ndim > 1:
                    up[:, k] += eps
                    dn[:, k] -= eps
                else:
                    up += eps
                    dn -= eps
                args[arg] = up
                fu = np.asarray(fn(*args), float)
                args[arg] = dn
                fd = np.asarray(fn(*args), float)
                cols.append((fu - fd) / (2 * eps))
            out = np.stack(cols, axis=-1)
            return out[..., 0] if base.ndim == 1 else out
        return wrapped

    def mu_grad(fn, x_pos, cloud_pos):
        def wrapped(*args):
            args = list(args)
            v = np.asarray(args[-1], float)[0]  # (Q, d)
            args = args[:-1]
            sq = [np.asarray(a)[:, 0] if isinstance(a, np.ndarray) and a.ndim >= 2 and a.shape[1] == 1 else a
                  for a in args]
            cloud = args[cloud_pos]
            scale = cloud.N + 1
            res = []
            for q in range(v.shape[0]):
                cols = []
                for k in range(d):
                    e = np.zeros(d)
                    e[k] = mu_eps
                    a_up, a_dn = list(sq), list(sq)
                    a_up[cloud_pos] = bump_add_atom(cloud, v[q] + e)
                    a_dn[cloud_pos] = bump_add_atom(cloud, v[q] - e)
                    cols.append(scale * (np.asarray(fn(*a_up), float) - np.asarray(fn(*a_dn), float))
                                / (2 * mu_eps))
                res.append(np.stack(cols, axis=-1))
            return np.stack(res, axis=1)
        return wrapped

    return Derivatives(
        b_x=grad(coeffs.b, 1, None), b_y=grad(coeffs.b, 3, None), b_z=grad(coeffs.b, 4, None),
        sigma_x=grad(coeffs.sigma, 1, None), sigma_y=grad(coeffs.sigma, 3, None),
        h_x=grad(coeffs.h, 1, None), h_y=grad(coeffs.h, 3, None),
        f_x=grad(coeffs.f, 1, None), f_y=grad(coeffs.f, 3, None), f_z=grad(coeffs.f, 4, None),
        g_x=grad(coeffs.g, 0, None),
        b_mu=mu_grad(coeffs.b, 1, 2), sigma_mu=mu_grad(coeffs.sigma, 1, 2),
        h_mu=mu_grad(coeffs.h, 1, 2), f_mu=mu_grad(coeffs.f, 1, 2), g_mu=mu_grad(coeffs.g, 0, 1),
    )
