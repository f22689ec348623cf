"""Focusing families of boundary geodesics.

A focusing family at ``(z0, t0)`` assigns to boundary points ``z`` of a small
patch an inward direction ``xi(z)`` and a time ``t(z)`` such that all geodesics
``gamma_{z, xi(z)}(t(z))`` meet at one interior point ``x0``, the point at
depth ``t0`` on the normal ray from ``z0``.  Families are either built from
geometry (forward) or searched for in a broken relation, and verified by
relation queries only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, GeometryError
from .geodesic.flow import shoot
from .geodesic.jacobi import orthonormal_complement
from .geodesic.legs import leg_solver
from .relation import BrokenRelation, Tolerances, _angle

ACCEPT_FRACTION = 0.95


@dataclass
class FocusingFamily:
    t0: float
    points: np.ndarray          # (k, n); row 0 is the anchor z0
    dirs: np.ndarray            # (k, n) inward unit directions
    times: np.ndarray           # (k,)
    mesh_index: Optional[np.ndarray] = None
    provenance: str = "forward"
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    @property
    def z0(self):
        return self.points[0]

    def shifted(self, dt: float) -> "FocusingFamily":
        """Same family with every time shifted by ``dt`` (a negative control)."""
        return FocusingFamily(self.t0, self.points, self.dirs, self.times + dt, self.mesh_index,
                              self.provenance + "+shift", dict(self.diagnostics))

    def tilted(self, spec, angle: float) -> "FocusingFamily":
        """Same family with the anchor direction tilted by ``angle`` (a negative control)."""
        E = orthonormal_complement(spec, self.z0, self.dirs[0])
        d = self.dirs.copy()
        d[0] = np.cos(angle) * d[0] + np.sin(angle) * E[0]
        return FocusingFamily(self.t0, self.points, d, self.times, self.mesh_index,
                              self.provenance + "+tilt", dict(self.diagnostics))

    def to_csv(self, path):
        n = self.points.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"z{i}" for i in range(n)] + [f"xi{i}" for i in range(n)] + ["t", "t0"])
            for p, d, t in zip(self.points, self.dirs, self.times):
                w.writerow([*map(float, p), *map(float, d), float(t), self.t0])


@dataclass
class FamilyCheck:
    single_fraction: float
    pair_fraction: float
    anchor_time_error: float
    anchor_angle: float
    grad_norm: float
    grad_tol: float
    accepted: bool


def _tangent_coords(spec, z0, nu0, P):
    E = orthonormal_complement(spec, z0, nu0)
    g = spec.metric(z0)
    return (P - z0) @ g @ E.T


def _design(U, order):
    cols = [np.ones(len(U))]
    if order >= 1:
        cols += [U[:, a] for a in range(U.shape[1])]
    if order >= 2:
        for a in range(U.shape[1]):
            for b in range(a, U.shape[1]):
                cols.append(U[:, a] * U[:, b])
    return np.stack(cols, axis=1)


def time_gradient(spec, family: FocusingFamily) -> float:
    """Norm of the fitted gradient of ``t`` at the anchor (quadratic fit over the patch)."""
    nu0 = spec.normal_field(family.z0[None])[0]
    U = _tangent_coords(spec, family.z0, nu0, family.points)
    order = 2 if len(U) >= _design(U[:1], 2).shape[1] + 1 else 1
    A = _design(U, order)
    coef, *_ = np.linalg.lstsq(A, family.times, rcond=None)
    return float(np.linalg.norm(coef[1:1 + U.shape[1]]))


# ---------------------------------------------------------------------------
# forward construction

def build_forward(spec, mesh, i0: int, t0: float, patch_size: int = 9,
                  check_tol: float = 1e-6) -> FocusingFamily:
    """Family through ``x0 = gamma_{z0, nu}(t0)`` from two-point legs.

    Each leg is re-integrated and dropped unless it reaches ``x0`` within
    ``check_tol``; the patch shrinks accordingly.
    """
    z0 = mesh.points[i0]
    nu0 = mesh.normals[i0]
    res = shoot(spec, z0, nu0, t0)
    if res.exited[0] or res.s[0] < t0 - 1e-9:
        raise DomainError(f"t0={t0} is not below the exit length {res.s[0]:.6g}")
    x0 = res.x[0]
    idx = mesh.patch(i0, patch_size)
    P = mesh.points[idx]
    L, D = leg_solver(spec)(x0[None], P)
    L, D = L[0], D[0]
    ok = np.isfinite(L)
    if not ok[0]:
        raise GeometryError("no leg from the focus point to the anchor")
    end = shoot(spec, P[ok], D[ok], L[ok], stop_at_boundary=False).x
    good = np.zeros(len(idx), bool)
    good[np.nonzero(ok)[0]] = spec.norm(end, end - x0) < check_tol
    if not good[0] or abs(L[0] - t0) > check_tol or spec.angle(z0, D[0], nu0) > 1e-6:
        raise GeometryError("anchor leg is not the normal geodesic")
    return FocusingFamily(t0, P[good], D[good], L[good], idx[good], "forward",
                          {"x0": x0.tolist(), "dropped": int(np.sum(~good))})


def focus_point(spec, family: FocusingFamily):
    """Endpoints of the family geodesics; returns ``(barycentre, spread)``."""
    res = shoot(spec, family.points, family.dirs, family.times, stop_at_boundary=False)
    X = res.x
    c = X.mean(axis=0)
    spread = max(float(np.max(spec.norm(X[i][None], X - X[i]))) for i in range(len(X)))
    return c, spread


# ---------------------------------------------------------------------------
# verification by relation queries

def _holds_list(rel: BrokenRelation, ent_idx, ent_pts, ent_dir, ex_idx, ex_pts, ex_dir, t, tol):
    if rel.n_legs and ent_idx is not None:
        return rel.holds_many(ent_idx, ent_dir, ex_idx, ex_dir, t, tol)
    return np.array([rel.holds((a, b), (c, d), tt, tol)
                     for a, b, c, d, tt in zip(ent_pts, ent_dir, ex_pts, ex_dir, t)])


def verify(rel: BrokenRelation, family: FocusingFamily, tol: Optional[Tolerances] = None,
           accept: float = ACCEPT_FRACTION, grad_tol: Optional[float] = None) -> FamilyCheck:
    """Check the family conditions against ``rel``.

    Singles: ``(z, xi(z)) -> (z0, -nu0)`` in time ``t(z) + t0``.  Pairs:
    ``(z, xi(z)) -> (z', -xi(z'))`` in time ``t(z) + t(z')`` for ``z != z'``.
    Anchor: ``t(z0) = t0``, ``xi(z0) = nu0`` and a vanishing time gradient.
    """
    spec = rel.spec
    tol = tol or rel.tol
    F = family
    k = len(F)
    nu0 = spec.normal_field(F.z0[None])[0]
    mi = F.mesh_index
    s_ok = _holds_list(rel, mi, F.points, F.dirs,
                       None if mi is None else np.full(k, mi[0]), np.repeat(F.z0[None], k, 0),
                       np.repeat(-nu0[None], k, 0), F.times + F.t0, tol)
    jj, kk = np.nonzero(~np.eye(k, dtype=bool))
    p_ok = _holds_list(rel, None if mi is None else mi[jj], F.points[jj], F.dirs[jj],
                       None if mi is None else mi[kk], F.points[kk], -F.dirs[kk],
                       F.times[jj] + F.times[kk], tol)
    U = _tangent_coords(spec, F.z0, nu0, F.points)
    radius = float(np.max(np.linalg.norm(U, axis=1))) if k > 1 else np.inf
    gtol = grad_tol if grad_tol is not None else 2 * tol.time / max(radius, 1e-12)
    grad = time_gradient(spec, F) if k > 2 else 0.0
    t_err = abs(F.times[0] - F.t0)
    ang = spec.angle(F.z0, F.dirs[0], nu0)
    sf = float(np.mean(s_ok))
    pf = float(np.mean(p_ok)) if len(p_ok) else 1.0
    accepted = (sf >= accept and pf >= accept and t_err <= tol.time and ang <= tol.angle
                and grad <= gtol)
    return FamilyCheck(sf, pf, float(t_err), float(ang), grad, gtol, bool(accepted))


# ---------------------------------------------------------------------------
# data-only search

class FocusingSearch:
    """Family search at a fixed anchor mesh point for many ``t0``.

    Candidates for ``(xi(z), T(z))`` are the events entering at ``z`` and
    leaving at ``z0`` against the normal; they are gathered once.  For each
    ``t0`` the nearest neighbour is seeded by support, the family grows
    outwards from the anchor, then a coordinate
    descent picks one candidate per patch point maximising pair consistency
    with the current choices.  Ties go to a quadratic time model pinned at
    the anchor.
    """

    def __init__(self, rel: BrokenRelation, i0: int, patch_size: int = 9,
                 tol: Optional[Tolerances] = None):
        if rel.n_legs == 0:
            raise DomainError("family search needs a lattice relation")
        self.rel = rel
        self.tol = tol or rel.tol
        self.i0 = int(i0)
        spec = rel.spec
        _, idx = rel.mesh_tree.query(rel.mesh_points[i0], k=min(patch_size, len(rel.mesh_points)))
        idx = np.atleast_1d(idx)
        self.patch = np.concatenate([[i0], idx[idx != i0]])[:patch_size]
        self.nu0 = rel.mesh_normals[i0]
        z0 = rel.mesh_points[i0]
        anchor_legs = rel._legs_near(z0, self.nu0, self.tol)
        nodes = rel.leg_node[anchor_legs]
        l0 = rel.leg_len[anchor_legs]
        self.cand_dir, self.cand_T = [], []
        for j in self.patch:
            D, T = [], []
            for k, lk in zip(nodes, l0):
                lo, hi = rel.leg_indptr[k], rel.leg_indptr[k + 1]
                block = rel.leg_mesh[lo:hi]
                p = np.searchsorted(block, j)
                if p < len(block) and block[p] == j:
                    D.append(rel.leg_dir[lo + p].astype(float))
                    T.append(rel.leg_len[lo + p] + lk)
            D = np.array(D).reshape(-1, spec.dimension)
            T = np.array(T)
            # candidates closer than the tolerances are indistinguishable
            L = np.linalg.cholesky(rel.mesh_metric[j])
            W = D @ L
            W /= np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-300)
            key = np.column_stack([np.floor(W / (0.5 * self.tol.angle)),
                                   np.floor(T / (0.5 * self.tol.time))])
            _, first = np.unique(key, axis=0, return_index=True)
            first = np.sort(first)
            self.cand_dir.append(D[first])
            self.cand_T.append(T[first])
        self.U = _tangent_coords(spec, z0, self.nu0, rel.mesh_points[self.patch])
        self.frames = [np.linalg.cholesky(rel.mesh_metric[j]) for j in self.patch]

    def _unit(self, D, a):
        W = D @ self.frames[a]
        return W / np.linalg.norm(W, axis=1, keepdims=True)

    def _consistent(self, j, k, ck, t0, cache):
        """Candidates at patch point ``j`` forming a pair event with candidate ``ck`` at ``k``."""
        rel, T = self.rel, self.cand_T
        key = (k, ck)
        if key not in cache:
            legs = rel._legs_near(rel.mesh_points[self.patch[k]], self.cand_dir[k][ck], self.tol)
            cache[key] = (rel.leg_node[legs], rel.leg_len[legs])
        nodes, len_k = cache[key]
        ok = np.zeros(len(T[j]), bool)
        if len(nodes) == 0 or len(T[j]) == 0:
            return ok
        lo, hi = rel.mesh_indptr[self.patch[j]], rel.mesh_indptr[self.patch[j] + 1]
        legs_j = rel.mesh_order[lo:hi]
        nb = rel.leg_node[legs_j]
        pos = np.minimum(np.searchsorted(nb, nodes), len(nb) - 1)
        has = nb[pos] == nodes
        if not np.any(has):
            return ok
        lj = legs_j[pos[has]]
        t_ev = len_k[has] + rel.leg_len[lj]                       # (h,)
        cos = self._unit(rel.leg_dir[lj].astype(float), j) @ self._unit(self.cand_dir[j], j).T
        ang = np.arccos(np.clip(cos, -1.0, 1.0))                   # (h, C_j)
        target = (T[j] - t0)[None, :] + (T[k][ck] - t0)
        hit = (ang <= self.tol.angle) & (np.abs(t_ev[:, None] - target) <= self.tol.time)
        return hit.any(axis=0)

    def candidate_family(self, t0: float, sweeps: int = 10) -> Optional[FocusingFamily]:
        rel, tol = self.rel, self.tol
        T = self.cand_T
        P = len(self.patch)
        if len(T[0]) == 0:
            return None
        ang0 = _angle(np.broadcast_to(rel.mesh_metric[self.i0], (len(T[0]),) + rel.mesh_metric.shape[1:]),
                      self.cand_dir[0], np.broadcast_to(self.nu0, self.cand_dir[0].shape))
        res0 = np.abs(T[0] - 2 * t0)
        ok0 = (ang0 <= tol.angle) & (res0 <= tol.time)
        if not np.any(ok0):
            return None
        # times are 1-Lipschitz along the boundary: |t(z) - t0| <= dist(z, z0)
        reach = np.linalg.norm(self.U, axis=1) * 1.5 + tol.time
        active = [np.abs(T[j] - 2 * t0) <= reach[j] for j in range(P)]
        live = [j for j in range(1, P) if np.any(active[j])]
        choice = {0: int(np.argmin(np.where(ok0, res0, np.inf)))}
        cache = {}

        def score(j):
            sc = active[j].astype(float)
            for k, ck in choice.items():
                if k != j:
                    sc = sc + self._consistent(j, k, ck, t0, cache)
            return sc

        if not live:
            return None
        # seed the nearest neighbour by support: the number of other patch
        # points holding some active candidate that pairs with it in time
        j1 = live[0]
        support = np.full(len(T[j1]), -1.0)
        for c in np.nonzero(active[j1])[0]:
            support[c] = sum(np.any(self._consistent(k, j1, c, t0, cache) & active[k])
                             for k in live[1:])
        choice[j1] = int(np.argmax(support - 1e-3 * np.abs(T[j1] - 2 * t0)))
        # grow outwards from the anchor
        for j in live[1:]:
            sc = score(j) - 1e-3 * np.abs(T[j] - 2 * t0)
            choice[j] = int(np.argmax(np.where(active[j], sc, -np.inf)))
        for _ in range(sweeps):
            changed = False
            for j in live:
                sc = np.where(active[j], score(j), -np.inf)
                best = int(np.argmax(sc))
                if sc[best] > sc[choice[j]]:
                    choice[j] = best
                    changed = True
            if not changed:
                break
        # quadratic model pinned at the anchor breaks remaining ties
        rows = [0] + live
        U = self.U[rows]
        Q = _design(U, 2)[:, 1 + U.shape[1]:]
        t_sel = np.array([T[j][choice[j]] - t0 for j in rows])
        if len(rows) > Q.shape[1] + 1:
            h, *_ = np.linalg.lstsq(Q[1:], t_sel[1:] - t0, rcond=None)
            model = t0 + Q @ h
            for r, j in enumerate(live, start=1):
                sc = np.where(active[j], score(j), -np.inf)
                tied = np.nonzero(sc == sc[choice[j]])[0]
                choice[j] = int(tied[np.argmin(np.abs(T[j][tied] - t0 - model[r]))])
        idx = self.patch[rows]
        dirs = np.array([self.cand_dir[j][choice[j]] for j in rows])
        times = np.array([T[j][choice[j]] - t0 for j in rows])
        return FocusingFamily(float(t0), rel.mesh_points[idx], dirs, times, idx, "search",
                              {"patch_size": len(rows)})

    def family(self, t0: float, accept: float = ACCEPT_FRACTION) -> Optional[FocusingFamily]:
        """First candidate family accepted by :func:`verify`, or ``None``."""
        F = self.candidate_family(t0)
        if F is None or len(F) < 3:
            return None
        chk = verify(self.rel, F, self.tol, accept)
        F.diagnostics["check"] = chk
        return F if chk.accepted else None


def search(rel: BrokenRelation, i0: int, t0: float, patch_size: int = 9) -> Optional[FocusingFamily]:
    """Data-only family at ``(mesh point i0, t0)``; ``None`` when nothing verifies."""
    return FocusingSearch(rel, i0, patch_size).family(t0)
