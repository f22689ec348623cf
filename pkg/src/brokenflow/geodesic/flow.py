"""Batch geodesic integration with boundary exit detection.

Geodesics are integrated in arclength with classical RK4; after every step the
velocity is rescaled to unit g-norm.  A step that crosses the boundary
(``rho`` changes sign) is re-taken with a bisected sub-step so the exit point
satisfies ``|rho| <= EXIT_TOL``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import BudgetError, ChartEscapeError, DomainError, GeometryError
from ..manifold import ManifoldSpec

EXIT_TOL = 1e-10
TRAP_FACTOR = 20.0

RUNNING, EXITED, BUDGET, CHART = 0, 1, 2, 3
STATUS_NAMES = {RUNNING: "running", EXITED: "exited", BUDGET: "budget", CHART: "chart"}


@dataclass(frozen=True)
class UnitTangent:
    """Base point and unit direction."""

    x: np.ndarray
    xi: np.ndarray

    @classmethod
    def make(cls, spec: ManifoldSpec, x, xi) -> "UnitTangent":
        x = spec.check_point(x)
        xi = np.asarray(xi, float)
        nrm = float(spec.norm(x, xi))
        if nrm == 0:
            raise DomainError("zero direction")
        return cls(x.copy(), xi / nrm)

    def reversed(self) -> "UnitTangent":
        return UnitTangent(self.x, -self.xi)


@dataclass(frozen=True)
class GeodesicPath:
    s: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    status: str
    exit_length: Optional[float] = None
    exit_point: Optional[np.ndarray] = None
    exit_dir: Optional[np.ndarray] = None

    def to_csv(self, path) -> None:
        n = self.x.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s"] + [f"x{i + 1}" for i in range(n)] + [f"xi{i + 1}" for i in range(n)])
            for s, x, v in zip(self.s, self.x, self.xi):
                w.writerow([repr(float(s))] + [repr(float(a)) for a in x] + [repr(float(a)) for a in v])


@dataclass
class BatchResult:
    x: np.ndarray
    v: np.ndarray
    s: np.ndarray
    status: np.ndarray

    @property
    def exited(self):
        return self.status == EXITED


def rk4_step(spec: ManifoldSpec, X, V, h):
    """One RK4 step of length ``h`` (scalar or per-ray) followed by speed renormalisation."""
    h = np.asarray(h, float)
    if h.ndim:
        h = h[:, None]
    a = spec.accel
    k1x, k1v = V, a(X, V)
    k2x = V + 0.5 * h * k1v
    k2v = a(X + 0.5 * h * k1x, k2x)
    k3x = V + 0.5 * h * k2v
    k3v = a(X + 0.5 * h * k2x, k3x)
    k4x = V + h * k3v
    k4v = a(X + h * k3x, k4x)
    Xn = X + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    Vn = V + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return Xn, spec.normalize(Xn, Vn)


def _refine_exit(spec, X, V, lo, hi, tol=EXIT_TOL, iters=80):
    """Bisect a sub-step in ``[lo, hi]`` so the end point sits on ``rho = 0``."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        Xm, Vm = rk4_step(spec, X, V, mid)
        r = spec.gap(Xm)
        inside = r >= 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
        if np.all(hi - lo < 1e-15):
            break
    # prefer the outside end point; |rho| there is at machine precision level
    Xh, Vh = rk4_step(spec, X, V, hi)
    Xl, Vl = rk4_step(spec, X, V, lo)
    use_lo = np.abs(spec.gap(Xl)) < np.abs(spec.gap(Xh))
    best_x = np.where(use_lo[:, None], Xl, Xh)
    best_v = np.where(use_lo[:, None], Vl, Vh)
    best_h = np.where(use_lo, lo, hi)
    return best_x, best_v, best_h


def shoot(spec: ManifoldSpec, X0, V0, s_max, step=None, stop_at_boundary=True,
          recorder=None) -> BatchResult:
    """Integrate many geodesics at once.

    ``s_max`` may be a scalar or a per-ray array.  Rays stop on boundary exit
    (when ``stop_at_boundary`` and the spec has a boundary), on leaving the
    chart, or when their budget is used up.  ``recorder(s, X, V, active)`` is
    called after every step when given.
    """
    X = np.array(X0, float, ndmin=2)
    V = spec.normalize(X, np.array(V0, float, ndmin=2))
    m = X.shape[0]
    step = spec.default_step if step is None else float(step)
    if step <= 0:
        raise ValueError("step must be positive")
    smax = np.broadcast_to(np.asarray(s_max, float), (m,)).copy()
    s = np.zeros(m)
    status = np.zeros(m, int)
    check_gap = stop_at_boundary and spec.has_boundary
    active = np.ones(m, bool)
    while True:
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        Xa, Va = X[idx], V[idx]
        h = np.minimum(step, smax[idx] - s[idx])
        Xn, Vn = rk4_step(spec, Xa, Va, h)
        if check_gap:
            cross = spec.gap(Xn) < 0
            if np.any(cross):
                c = np.nonzero(cross)[0]
                xr, vr, hr = _refine_exit(spec, Xa[c], Va[c], np.zeros(c.size), h[c])
                Xn[c], Vn[c] = xr, vr
                h = h.copy()
                h[c] = hr
                status[idx[c]] = EXITED
        X[idx], V[idx] = Xn, Vn
        s[idx] += h
        out = ~spec.in_chart(Xn) & (status[idx] == RUNNING)
        status[idx[out]] = CHART
        done = (status[idx] == RUNNING) & (s[idx] >= smax[idx] - 1e-15)
        status[idx[done]] = BUDGET
        if recorder is not None:
            recorder(s.copy(), X.copy(), V.copy(), idx)
        active[idx] = status[idx] == RUNNING
    return BatchResult(X, V, s, status)


def integrate(spec: ManifoldSpec, start: UnitTangent, s_max: float, step=None,
              stop_at_boundary=True) -> GeodesicPath:
    """Integrate a single geodesic and keep every sample."""
    step = spec.default_step if step is None else step
    if step <= 0:
        raise ValueError("step must be positive")
    if s_max <= 0:
        raise ValueError("s_max must be positive")
    ss, xs, vs = [0.0], [np.asarray(start.x, float)], [np.asarray(start.xi, float)]

    def rec(s, X, V, idx):
        ss.append(float(s[0]))
        xs.append(X[0])
        vs.append(V[0])

    res = shoot(spec, start.x, start.xi, s_max, step, stop_at_boundary, recorder=rec)
    st = int(res.status[0])
    if st == CHART:
        raise ChartEscapeError(f"geodesic left the chart at s={res.s[0]:.6g}")
    path = dict(s=np.array(ss), x=np.array(xs), xi=np.array(vs), status=STATUS_NAMES[st])
    if st == EXITED:
        path.update(exit_length=float(res.s[0]), exit_point=res.x[0].copy(), exit_dir=res.v[0].copy())
    return GeodesicPath(**path)


def trap_budget(spec: ManifoldSpec) -> float:
    return TRAP_FACTOR * spec.chart_diameter


def first_exit(spec: ManifoldSpec, start: UnitTangent, step=None):
    """Exit length, exit point and exit direction of the geodesic from ``start``."""
    if not spec.has_boundary:
        raise DomainError("manifold has no boundary")
    res = shoot(spec, start.x, start.xi, trap_budget(spec), step)
    st = int(res.status[0])
    if st == EXITED:
        return float(res.s[0]), res.x[0].copy(), UnitTangent(res.x[0].copy(), res.v[0].copy())
    if st == CHART:
        raise ChartEscapeError("geodesic left the chart before exiting M")
    raise BudgetError("no boundary exit within the trapping budget",
                      path=integrate(spec, start, min(res.s[0], 10 * spec.chart_diameter), step))


def exit_batch(spec: ManifoldSpec, X, V, step=None, s_max=None) -> BatchResult:
    """Vectorised :func:`first_exit`; inspect ``status`` for dropped rays."""
    return shoot(spec, X, V, trap_budget(spec) if s_max is None else s_max, step)


def connect(spec: ManifoldSpec, x, y, guess=None, tol=1e-10, max_iter=30, step=None):
    """Two-point shooting: unit ``xi`` and length ``L`` with ``exp_x(L xi) = y``.

    Damped Newton on the end-point mismatch with a finite-difference Jacobian;
    the initial guess is the coordinate chord.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = x.size
    if guess is not None:
        u = np.asarray(guess, float)
    else:
        u = spec.normalize(x, y - x) * _chord_length(spec, x, y)

    def endpoint(U):
        L = spec.norm(np.broadcast_to(x, U.shape), U)
        res = shoot(spec, np.broadcast_to(x, U.shape), U, L, step, stop_at_boundary=False)
        return res.x, res.v

    err = np.inf
    for _ in range(max_iter):
        h = 1e-6 * max(1.0, float(np.linalg.norm(u)))
        U = np.vstack([u, u + h * np.eye(n)])
        P, W = endpoint(U)
        F = P[0] - y
        err_new = float(np.linalg.norm(F))
        if err_new < tol:
            return spec.normalize(x, u), float(spec.norm(x, u)), W[0]
        Jm = (P[1:] - P[0]).T / h
        try:
            du = np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError as exc:
            raise GeometryError("singular shooting Jacobian") from exc
        lam = 1.0
        for _ in range(20):
            P2, _ = endpoint((u + lam * du)[None])
            if np.linalg.norm(P2[0] - y) < err_new:
                break
            lam *= 0.5
        u = u + lam * du
        err = err_new
    raise GeometryError(f"two-point shooting did not converge (residual {err:.3g})")


def _chord_length(spec, x, y, k=16):
    t = (np.arange(k) + 0.5) / k
    pts = x + t[:, None] * (y - x)
    return float(np.mean(spec.norm(pts, np.broadcast_to(y - x, pts.shape))))


def speed_drift(spec: ManifoldSpec, X, V, s_max, step=None) -> float:
    """Largest ``| |v|_g - 1 |`` seen while integrating the given rays (no boundary stop)."""
    worst = [0.0]

    def rec(s, Xs, Vs, idx):
        worst[0] = max(worst[0], float(np.max(np.abs(spec.norm(Xs[idx], Vs[idx]) - 1.0))))

    shoot(spec, X, V, s_max, step, stop_at_boundary=False, recorder=rec)
    return worst[0]
