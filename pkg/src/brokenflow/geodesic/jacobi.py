"""Jacobi fields through the linearised geodesic flow.

Columns of ``J`` are variations ``(dX, dV)`` carried along a geodesic by the
linearisation of the geodesic ODE; the linearised acceleration is a central
difference of the acceleration field.  Degeneracy of ``J`` is tracked through
``sigma(s) = sqrt(lambda_min(Gram_g[J | gamma']))`` which vanishes exactly at
conjugate (Dirichlet) or focal (Robin) points, including points of even
multiplicity where ``det J`` does not change sign.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..manifold import ManifoldSpec, inward_normal
from .flow import UnitTangent, first_exit, trap_budget

ZERO_TOL = 1e-6
_GOLD = 0.5 * (np.sqrt(5.0) - 1.0)


@dataclass(frozen=True)
class JacobiSolution:
    s: np.ndarray          # (k,)
    x: np.ndarray          # (k, n) base geodesic
    v: np.ndarray          # (k, n)
    J: np.ndarray          # (k, c, n) field values
    dJ: np.ndarray         # (k, c, n) coordinate derivatives
    kind: str              # "dirichlet" | "robin"

    def sigma(self, spec: ManifoldSpec) -> np.ndarray:
        return _sigma(spec, self.x, self.v, self.J)


def orthonormal_complement(spec: ManifoldSpec, x, v) -> np.ndarray:
    """g-orthonormal basis (rows) of the complement of ``v`` at ``x``."""
    g = spec.metric(x)
    n = x.size
    basis = [v / np.sqrt(v @ g @ v)]
    for e in np.eye(n):
        w = e - sum((e @ g @ b) * b for b in basis)
        nrm = np.sqrt(w @ g @ w)
        if nrm > 1e-8:
            basis.append(w / nrm)
        if len(basis) == n:
            break
    return np.array(basis[1:])


def _lin_accel(spec, X, V, dX, dV, eps=1e-6):
    # X, V: (m, n); dX, dV: (m, c, n)
    m, c, n = dX.shape
    scale = np.maximum(np.linalg.norm(dX, axis=-1), np.linalg.norm(dV, axis=-1))
    scale = np.where(scale > 0, scale, 1.0)[..., None]
    e = eps / scale
    Xp = (X[:, None, :] + e * dX).reshape(-1, n)
    Vp = (V[:, None, :] + e * dV).reshape(-1, n)
    Xm = (X[:, None, :] - e * dX).reshape(-1, n)
    Vm = (V[:, None, :] - e * dV).reshape(-1, n)
    d = (spec.accel(Xp, Vp) - spec.accel(Xm, Vm)).reshape(m, c, n)
    return d / (2 * e)


def _rhs(spec, X, V, dX, dV):
    return V, spec.accel(X, V), dV, _lin_accel(spec, X, V, dX, dV)


def _step(spec, state, h):
    X, V, dX, dV = state
    h = np.asarray(h, float)
    hv = h[:, None] if h.ndim else h
    hj = h[:, None, None] if h.ndim else h
    k1 = _rhs(spec, X, V, dX, dV)
    k2 = _rhs(spec, X + 0.5 * hv * k1[0], V + 0.5 * hv * k1[1], dX + 0.5 * hj * k1[2], dV + 0.5 * hj * k1[3])
    k3 = _rhs(spec, X + 0.5 * hv * k2[0], V + 0.5 * hv * k2[1], dX + 0.5 * hj * k2[2], dV + 0.5 * hj * k2[3])
    k4 = _rhs(spec, X + hv * k3[0], V + hv * k3[1], dX + hj * k3[2], dV + hj * k3[3])
    out = []
    for i, hh in enumerate((hv, hv, hj, hj)):
        out.append(state[i] + hh / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]))
    return tuple(out)


def _sigma(spec, X, V, J):
    """Smallest singular value of ``[J | V]`` in a g-orthonormal frame."""
    M = np.concatenate([J, V[..., None, :]], axis=-2)      # (..., c+1, n)
    G = spec.metric(X)
    gram = np.einsum("...ai,...ij,...bj->...ab", M, G, M)
    lam = np.linalg.eigvalsh(gram)[..., 0]
    return np.sqrt(np.maximum(lam, 0.0))


def solve_batch(spec: ManifoldSpec, X0, V0, dX0, dV0, s_max, step=None):
    """Integrate base geodesics and their variations on a common grid.

    Returns grid ``s`` and arrays ``X (k, m, n)``, ``V``, ``dX (k, m, c, n)``,
    ``dV``.  ``s_max`` may differ per ray; rays stop contributing (frozen)
    beyond their own ``s_max`` or when they leave the chart.
    """
    step = spec.default_step if step is None else step
    X = np.array(X0, float, ndmin=2)
    V = spec.normalize(X, np.array(V0, float, ndmin=2))
    dX = np.array(dX0, float, ndmin=3)
    dV = np.array(dV0, float, ndmin=3)
    smax = np.broadcast_to(np.asarray(s_max, float), (X.shape[0],))
    kmax = int(np.ceil(smax.max() / step))
    state = (X, V, dX, dV)
    hist = [state]
    alive = np.ones(X.shape[0], bool)
    for k in range(kmax):
        new = _step(spec, state, step)
        alive = alive & spec.in_chart(new[0]) & ((k + 1) * step <= smax + step)
        state = tuple(np.where(_bcast(alive, a), a, b) for a, b in zip(new, state))
        hist.append(state)
    s = step * np.arange(kmax + 1)
    return s, tuple(np.array([h[i] for h in hist]) for i in range(4))


def _bcast(mask, a):
    return mask.reshape(mask.shape + (1,) * (a.ndim - 1))


def _first_zero(spec, s, X, V, dX, dV, smax, step, skip=0.0):
    sig = _sigma(spec, X, V, dX)
    scale = np.maximum.accumulate(np.maximum(sig, 1e-12))
    valid = s <= smax
    for k in range(1, len(s) - 1):
        if not valid[k + 1] or s[k] <= skip:
            continue
        if sig[k] <= sig[k - 1] and sig[k] <= sig[k + 1]:
            if sig[k] > 1e-2 * scale[k]:
                continue
            t, val = _golden(spec, (X[k - 1], V[k - 1], dX[k - 1], dV[k - 1]), 2 * step)
            if val <= ZERO_TOL * max(1.0, scale[k]):
                root = s[k - 1] + t
                if root <= smax:
                    return float(root)
    return None


def _golden(spec, st, width, iters=60):
    st = tuple(a[None] for a in st)

    def f(t):
        X, V, dX, _ = _step(spec, st, t)
        return float(_sigma(spec, X, V, dX)[0])

    a, b = 0.0, width
    c, d = b - _GOLD * (b - a), a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    t = 0.5 * (a + b)
    return t, f(t)


def dirichlet_data(spec, x, xi):
    E = orthonormal_complement(spec, x, xi)
    return np.zeros_like(E), E


def robin_data(spec, z, h=1e-6):
    """Tangent variations of the normal geodesic family at a boundary point."""
    nu = inward_normal(spec, z)
    E = orthonormal_complement(spec, z, nu)
    dV = np.array([(spec.normal_field(z + h * e) - spec.normal_field(z - h * e)) / (2 * h) for e in E])
    return nu, E, dV


def jacobi(spec: ManifoldSpec, start: UnitTangent, s_max: float, kind="dirichlet", step=None) -> JacobiSolution:
    if kind == "dirichlet":
        dX, dV = dirichlet_data(spec, start.x, start.xi)
        xi = start.xi
    elif kind == "robin":
        xi, dX, dV = robin_data(spec, start.x)
    else:
        raise ValueError(f"unknown boundary condition {kind!r}")
    s, (X, V, J, dJ) = solve_batch(spec, start.x, xi, dX[None], dV[None], s_max, step)
    return JacobiSolution(s, X[:, 0], V[:, 0], J[:, 0], dJ[:, 0], kind)


def conjugate_distance(spec: ManifoldSpec, start: UnitTangent, s_max: float, step=None) -> Optional[float]:
    """First conjugate point along the geodesic from ``start`` within ``s_max``, or None."""
    step = spec.default_step if step is None else step
    dX, dV = dirichlet_data(spec, start.x, start.xi)
    s, (X, V, J, dJ) = solve_batch(spec, start.x, start.xi, dX[None], dV[None], s_max, step)
    return _first_zero(spec, s, X[:, 0], V[:, 0], J[:, 0], dJ[:, 0], s_max, step, skip=step)


def focal_distance(spec: ManifoldSpec, z, s_max: Optional[float] = None, step=None) -> Optional[float]:
    """First focal point of the boundary along the inward normal geodesic, or None.

    By default the search runs until the normal geodesic leaves ``M``.
    """
    step = spec.default_step if step is None else step
    z = np.asarray(z, float)
    nu, dX, dV = robin_data(spec, z)
    if s_max is None:
        try:
            s_max = first_exit(spec, UnitTangent(z, nu), step)[0]
        except Exception:
            s_max = trap_budget(spec)
    s, (X, V, J, dJ) = solve_batch(spec, z, nu, dX[None], dV[None], s_max, step)
    return _first_zero(spec, s, X[:, 0], V[:, 0], J[:, 0], dJ[:, 0], s_max, step)


def sigma_profile(spec: ManifoldSpec, start: UnitTangent, s_max, kind="dirichlet", step=None):
    """Grid samples of the degeneracy measure, useful as a dense-scan oracle."""
    sol = jacobi(spec, start, s_max, kind, step)
    return sol.s, sol.sigma(spec)


def focal_distance_batch(spec: ManifoldSpec, Z, s_max=None, step=None):
    """:func:`focal_distance` for many boundary points sharing one integration loop."""
    step = spec.default_step if step is None else step
    Z = np.asarray(Z, float)
    data = [robin_data(spec, z) for z in Z]
    nu = np.array([d[0] for d in data])
    if s_max is None:
        from .flow import exit_batch
        res = exit_batch(spec, Z, nu, step)
        s_max = np.where(res.exited, res.s, trap_budget(spec))
    s_max = np.broadcast_to(np.asarray(s_max, float), (len(Z),))
    s, (X, V, J, dJ) = solve_batch(spec, Z, nu, np.array([d[1] for d in data]),
                                   np.array([d[2] for d in data]), s_max, step)
    return [_first_zero(spec, s, X[:, i], V[:, i], J[:, i], dJ[:, i], s_max[i], step)
            for i in range(len(Z))]


def conjugate_distance_batch(spec: ManifoldSpec, X0, V0, s_max, step=None):
    """:func:`conjugate_distance` for many starts."""
    step = spec.default_step if step is None else step
    X0 = np.asarray(X0, float)
    V0 = spec.normalize(X0, np.asarray(V0, float))
    data = [dirichlet_data(spec, x, v) for x, v in zip(X0, V0)]
    s_max = np.broadcast_to(np.asarray(s_max, float), (len(X0),))
    s, (X, V, J, dJ) = solve_batch(spec, X0, V0, np.array([d[0] for d in data]),
                                   np.array([d[1] for d in data]), s_max, step)
    return [_first_zero(spec, s, X[:, i], V[:, i], J[:, i], dJ[:, i], s_max[i], step, skip=step)
            for i in range(len(X0))]
