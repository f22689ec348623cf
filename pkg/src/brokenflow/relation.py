"""Finite broken scattering relations.

A relation is stored in two complementary forms:

* a *lattice*: scatter nodes with geodesic legs to boundary mesh points.  A
  leg records its mesh point, its inward unit direction there and its length.
  Every ordered pair of legs (a, b) at one node is an event: entry at leg a's
  mesh point along its direction, exit at leg b's mesh point along the
  reversed direction, total time ``len_a + len_b``.  Nodes on the inward
  normal rays make the normal ladder, focusing and witness events explicit.
* explicit event arrays, produced by ray sampling or from transport arrivals.

Queries only see boundary states and times; node positions are kept as
debug data for replay checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .errors import CoverageError
from .manifold import ManifoldSpec

TANGENTIAL_CUTOFF = 1e-3


@dataclass(frozen=True)
class Tolerances:
    space: float
    angle: float
    time: float

    def scaled(self, f: float) -> "Tolerances":
        return Tolerances(self.space * f, self.angle * f, self.time * f)


@dataclass(frozen=True)
class BrokenEvent:
    x: np.ndarray
    xi: np.ndarray
    y: np.ndarray
    zeta: np.ndarray
    t: float
    scatter: Optional[np.ndarray] = None   # debug only
    s1: Optional[float] = None             # debug only

    def reversed(self) -> "BrokenEvent":
        s1 = None if self.s1 is None else self.t - self.s1
        return BrokenEvent(self.y, -self.zeta, self.x, -self.xi, self.t, self.scatter, s1)


@dataclass
class NearEvents:
    entry: np.ndarray        # (k, n) entry base points
    exit: np.ndarray         # (k, n)
    t: np.ndarray            # (k,)
    entry_misfit: np.ndarray  # angle of entry direction to the inward normal
    exit_misfit: np.ndarray   # angle of exit direction to the outward normal
    entry_index: np.ndarray  # mesh index of the entry base (-1 for explicit events)

    def __len__(self):
        return len(self.t)


def _angle(g, u, v):
    """g-angle between unit vectors ``u`` and ``v`` (arrays with matching leading axes)."""
    c = np.einsum("...i,...ij,...j->...", u, g, v)
    nu = np.sqrt(np.einsum("...i,...ij,...j->...", u, g, u))
    nv = np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))
    return np.arccos(np.clip(c / (nu * nv), -1.0, 1.0))


def _ranges(lo, hi):
    """Concatenated ``arange(lo[k], hi[k])`` with the owning ``k`` of each element."""
    cnt = hi - lo
    tot = int(cnt.sum())
    owner = np.repeat(np.arange(len(lo)), cnt)
    start = np.repeat(lo - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
    return owner, start + np.arange(tot)


class BrokenRelation:
    def __init__(self, spec: ManifoldSpec, tol: Tolerances, *, provenance="geometric", params=None,
                 mesh_points=None, node_pos=None, node_base=None, node_depth=None,
                 leg_indptr=None, leg_mesh=None, leg_len=None, leg_dir=None,
                 events=None):
        self.spec = spec
        self.spec_hash = spec.spec_hash
        self.tol = tol
        self.provenance = provenance
        self.params = dict(params or {})
        n = spec.dimension
        self.dimension = n
        # lattice
        self.mesh_points = np.zeros((0, n)) if mesh_points is None else np.asarray(mesh_points, float)
        m = len(self.mesh_points)
        self.node_pos = np.zeros((0, n)) if node_pos is None else np.asarray(node_pos, float)
        self.node_base = np.zeros(0, np.int32) if node_base is None else np.asarray(node_base, np.int32)
        self.node_depth = np.zeros(0) if node_depth is None else np.asarray(node_depth, float)
        N = len(self.node_pos)
        self.leg_indptr = np.zeros(N + 1, np.int64) if leg_indptr is None else np.asarray(leg_indptr, np.int64)
        self.leg_mesh = np.zeros(0, np.int32) if leg_mesh is None else np.asarray(leg_mesh, np.int32)
        self.leg_len = np.zeros(0) if leg_len is None else np.asarray(leg_len, float)
        self.leg_dir = np.zeros((0, n), np.float32) if leg_dir is None else np.asarray(leg_dir, np.float32)
        self.leg_node = np.repeat(np.arange(N, dtype=np.int32), np.diff(self.leg_indptr))
        if m:
            self.mesh_tree = cKDTree(self.mesh_points)
            self.mesh_metric = spec.metric(self.mesh_points)
            self.mesh_normals = spec.normal_field(self.mesh_points)
            order = np.argsort(self.leg_mesh, kind="stable").astype(np.int64)
            self.mesh_order = order
            self.mesh_indptr = np.searchsorted(self.leg_mesh[order], np.arange(m + 1)).astype(np.int64)
            g = self.mesh_metric[self.leg_mesh]
            self.leg_normal_angle = _angle(g, self.leg_dir.astype(float), self.mesh_normals[self.leg_mesh]).astype(np.float32)
        else:
            self.mesh_tree = None
            self.mesh_metric = np.zeros((0, n, n))
            self.mesh_normals = np.zeros((0, n))
            self.mesh_order = np.zeros(0, np.int64)
            self.mesh_indptr = np.zeros(1, np.int64)
            self.leg_normal_angle = np.zeros(0, np.float32)
        # explicit events
        ev = events or {}
        self.ev_x = np.asarray(ev.get("x", np.zeros((0, n))), float)
        self.ev_xi = np.asarray(ev.get("xi", np.zeros((0, n))), float)
        self.ev_y = np.asarray(ev.get("y", np.zeros((0, n))), float)
        self.ev_zeta = np.asarray(ev.get("zeta", np.zeros((0, n))), float)
        self.ev_t = np.asarray(ev.get("t", np.zeros(0)), float)
        self.ev_scatter = ev.get("scatter")
        self.ev_s1 = ev.get("s1")
        if len(self.ev_t):
            self.ev_gx = spec.metric(self.ev_x)
            self.ev_gy = spec.metric(self.ev_y)
            self.ev_tree = cKDTree(self.ev_x)
            self.ev_entry_misfit = _angle(self.ev_gx, self.ev_xi, spec.normal_field(self.ev_x))
            self.ev_exit_misfit = _angle(self.ev_gy, -self.ev_zeta, spec.normal_field(self.ev_y))
        else:
            self.ev_tree = None

    # -- size ----------------------------------------------------------
    @property
    def n_nodes(self):
        return len(self.node_pos)

    @property
    def n_legs(self):
        return len(self.leg_len)

    @property
    def n_explicit(self):
        return len(self.ev_t)

    @property
    def n_events(self) -> int:
        deg = np.diff(self.leg_indptr)
        return int(np.sum(deg.astype(np.int64) ** 2)) + self.n_explicit

    def __len__(self):
        return self.n_events

    def __repr__(self):
        return (f"BrokenRelation({self.provenance}, nodes={self.n_nodes}, legs={self.n_legs}, "
                f"explicit={self.n_explicit}, events={self.n_events})")

    # -- lattice leg lookup --------------------------------------------
    def _legs_near(self, point, direction, tol: Tolerances, exclude_mesh=None):
        """Legs whose mesh point is within ``tol.space`` of ``point`` and whose
        inward direction is within ``tol.angle`` of ``direction``."""
        if self.mesh_tree is None or self.n_legs == 0:
            return np.zeros(0, np.int64)
        idx = self.mesh_tree.query_ball_point(np.asarray(point, float), tol.space)
        if exclude_mesh is not None:
            idx = [i for i in idx if i != exclude_mesh]
        if not idx:
            return np.zeros(0, np.int64)
        idx = np.asarray(sorted(idx))
        self._ensure_angle_index()
        d = np.asarray(direction, float)
        gd = self.mesh_metric[idx] @ d                          # one metric per mesh point
        dn = np.sqrt(gd @ d)
        # a leg within tol.angle of d has its normal angle within tol.angle of d's
        th = np.arccos(np.clip(np.einsum("ki,ki->k", gd, self.mesh_normals[idx]) / dn, -1.0, 1.0))
        lo, hi = self.mesh_indptr[idx], self.mesh_indptr[idx + 1]
        a = np.array([lo[k] + np.searchsorted(self._angle_sorted[lo[k]:hi[k]], th[k] - tol.angle - 1e-5)
                      for k in range(len(idx))], np.int64)
        b = np.array([lo[k] + np.searchsorted(self._angle_sorted[lo[k]:hi[k]], th[k] + tol.angle + 1e-5, "right")
                      for k in range(len(idx))], np.int64)
        owner, pos = _ranges(a, b)
        legs = self._by_angle[pos]
        if not hasattr(self, "_leg_gnorm"):
            self._leg_gnorm = np.concatenate([
                np.sqrt(np.einsum("ki,kij,kj->k", d_, self.mesh_metric[m], d_))
                for d_, m in zip(np.array_split(self.leg_dir.astype(float), 64),
                                 np.array_split(self.leg_mesh, 64))])
        c = np.einsum("ki,ki->k", self.leg_dir[legs], gd[owner]) / (self._leg_gnorm[legs] * dn[owner])
        return legs[c >= np.cos(tol.angle)]

    def _join(self, A, B):
        """All (a, b) leg pairs sharing a node."""
        if len(A) == 0 or len(B) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        nb = self.leg_node[B]
        order = np.argsort(nb, kind="stable")
        Bs, nbs = B[order], nb[order]
        na = self.leg_node[A]
        lo = np.searchsorted(nbs, na, "left")
        hi = np.searchsorted(nbs, na, "right")
        owner, pos = _ranges(lo, hi)
        return A[owner], Bs[pos]

    def _explicit_match(self, entry, exit, tol: Tolerances):
        if self.ev_tree is None:
            return np.zeros(0, np.int64)
        x, xi = entry
        y, zeta = exit
        idx = np.asarray(self.ev_tree.query_ball_point(np.asarray(x, float), tol.space), dtype=np.int64)
        if idx.size == 0:
            return idx
        ok = np.linalg.norm(self.ev_y[idx] - np.asarray(y, float), axis=1) <= tol.space
        idx = idx[ok]
        if idx.size == 0:
            return idx
        a1 = _angle(self.ev_gx[idx], self.ev_xi[idx], np.broadcast_to(xi, (len(idx), self.dimension)))
        a2 = _angle(self.ev_gy[idx], self.ev_zeta[idx], np.broadcast_to(zeta, (len(idx), self.dimension)))
        return idx[(a1 <= tol.angle) & (a2 <= tol.angle)]

    # -- public queries ------------------------------------------------
    def times_between(self, entry, exit, tol: Optional[Tolerances] = None) -> np.ndarray:
        """Times ``t`` of all events matching ``entry=(x, xi)`` and ``exit=(y, zeta)``."""
        tol = tol or self.tol
        x, xi = entry
        y, zeta = exit
        A = self._legs_near(x, xi, tol)
        B = self._legs_near(y, -np.asarray(zeta, float), tol)
        a, b = self._join(A, B)
        t_lat = self.leg_len[a] + self.leg_len[b]
        t_exp = self.ev_t[self._explicit_match(entry, exit, tol)]
        return np.sort(np.concatenate([t_lat, t_exp]))

    def holds(self, entry, exit, t: float, tol: Optional[Tolerances] = None) -> bool:
        tol = tol or self.tol
        ts = self.times_between(entry, exit, tol)
        return bool(np.any(np.abs(ts - t) <= tol.time))

    def near_events(self, z, delta: float, angle_tol: Optional[float] = None,
                    exit_exact: bool = False) -> NearEvents:
        """Events exiting near ``(z, outward normal)`` that entered near-normally at another base.

        Positions are matched within ``delta``; directions within ``angle_tol``
        (default ``delta``).  With ``exit_exact`` only exits at the mesh point
        nearest to ``z`` are used.
        """
        n = self.dimension
        z = np.asarray(z, float)
        atol = delta if angle_tol is None else angle_tol
        empty = NearEvents(np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), np.zeros(0), np.zeros(0),
                           np.zeros(0, int))
        if delta <= 0:
            return empty
        parts = []
        if self.mesh_tree is not None and self.n_legs:
            d0, i0 = self.mesh_tree.query(z)
            exit_mesh = [int(i0)] if exit_exact else self.mesh_tree.query_ball_point(z, delta)
            entry_mesh = [i for i in self.mesh_tree.query_ball_point(z, delta)
                          if np.linalg.norm(self.mesh_points[i] - z) > 1e-12 and i != i0]
            if exit_mesh and entry_mesh:
                A = self._normal_legs(entry_mesh, atol)
                B = self._normal_legs(exit_mesh, atol)
                a, b = self._join(A, B)
                parts.append(NearEvents(self.mesh_points[self.leg_mesh[a]], self.mesh_points[self.leg_mesh[b]],
                                        self.leg_len[a] + self.leg_len[b],
                                        self.leg_normal_angle[a].astype(float),
                                        self.leg_normal_angle[b].astype(float),
                                        self.leg_mesh[a].astype(int)))
        if self.ev_tree is not None:
            ok = ((np.linalg.norm(self.ev_y - z, axis=1) <= delta)
                  & (np.linalg.norm(self.ev_x - z, axis=1) <= delta)
                  & (np.linalg.norm(self.ev_x - z, axis=1) > 1e-12)
                  & (self.ev_entry_misfit <= atol) & (self.ev_exit_misfit <= atol))
            k = np.nonzero(ok)[0]
            parts.append(NearEvents(self.ev_x[k], self.ev_y[k], self.ev_t[k], self.ev_entry_misfit[k],
                                    self.ev_exit_misfit[k], np.full(len(k), -1)))
        if not parts:
            return empty
        return NearEvents(*[np.concatenate([getattr(p, f) for p in parts])
                            for f in ("entry", "exit", "t", "entry_misfit", "exit_misfit", "entry_index")])

    def _ensure_angle_index(self):
        if not hasattr(self, "_by_angle"):
            # legs grouped by mesh point, ascending normal angle within each group
            self._by_angle = np.lexsort((self.leg_normal_angle, self.leg_mesh)).astype(np.int64)
            self._angle_sorted = self.leg_normal_angle[self._by_angle]

    def _normal_legs(self, mesh_idx, atol):
        """Legs at the given mesh points within ``atol`` of the normal."""
        self._ensure_angle_index()
        mesh_idx = np.asarray(sorted(mesh_idx), np.int64)
        lo = self.mesh_indptr[mesh_idx]
        hi = self.mesh_indptr[mesh_idx + 1]
        cut = np.array([lo[k] + np.searchsorted(self._angle_sorted[lo[k]:hi[k]], atol, "right")
                        for k in range(len(lo))], np.int64).reshape(-1)
        _, pos = _ranges(lo, cut)
        return self._by_angle[pos]

    def normal_ladder(self, i: int, atol: float):
        """Self-relation times ``2 len`` of near-normal legs at mesh point ``i``."""
        legs = self._normal_legs([i], atol)
        return 2.0 * self.leg_len[legs]

    def min_time_edges(self, exit_normal_tol: Optional[float] = None, t_max: float = np.inf,
                       dense: Optional[bool] = None):
        """Minimum event time for every (entry mesh, exit mesh) pair.

        Optionally restricted to exits within ``exit_normal_tol`` of the normal
        and to times below ``t_max``.  Returns ``(I, J, T)`` arrays.
        """
        m = len(self.mesh_points)
        exit_ok = np.ones(self.n_legs, np.bool_) if exit_normal_tol is None else \
            (self.leg_normal_angle <= exit_normal_tol)
        if dense is None:
            dense = m * m <= 4_000_000 and not np.isfinite(t_max)
        if dense:
            E = _kernels.minplus_dense(self.leg_indptr, self.leg_mesh, self.leg_len, exit_ok, m)
            I, J = np.nonzero(np.isfinite(E) & (E < t_max))
            return I, J, E[I, J]
        size = _kernels.pair_count(self.leg_indptr, exit_ok, self.leg_len, t_max)
        I, J, T = _kernels.pair_fill(self.leg_indptr, self.leg_mesh, self.leg_len, exit_ok, t_max, size)
        key = I * m + J
        order = np.lexsort((T, key))
        key, T = key[order], T[order]
        first = np.concatenate([[True], key[1:] != key[:-1]]) if len(key) else np.zeros(0, bool)
        key, T = key[first], T[first]
        return key // m, key % m, T

    def _mesh_neighbors(self, idx, space):
        if space <= 0:
            return [[i] for i in idx]
        return [sorted(self.mesh_tree.query_ball_point(self.mesh_points[i], space)) for i in idx]

    def match_events(self, entry_mesh, entry_dir, exit_mesh, exit_dir, tol: Optional[Tolerances] = None):
        """Lattice events matching many (entry, exit) boundary-state queries.

        Entries and exits are given by mesh indices and unit directions (entry
        inward, exit outward).  Returns ``(query_index, event_time)`` for every
        matching event; time filtering is left to the caller.
        """
        tol = tol or self.tol
        entry_mesh = np.asarray(entry_mesh, int)
        exit_mesh = np.asarray(exit_mesh, int)
        Q = len(entry_mesh)
        ein = np.asarray(entry_dir, float).reshape(Q, -1)
        xin = -np.asarray(exit_dir, float).reshape(Q, -1)      # inward direction of the exit leg
        if Q == 0 or self.n_legs == 0:
            return np.zeros(0, int), np.zeros(0)
        keys_e = np.column_stack([entry_mesh, np.round(ein, 9)])
        keys_x = np.column_stack([exit_mesh, np.round(xin, 9)])
        ue, inv_e = np.unique(keys_e, axis=0, return_inverse=True)
        ux, inv_x = np.unique(keys_x, axis=0, return_inverse=True)
        if len(ue) <= len(ux):
            g_mesh, g_dir, inv, o_mesh, o_dir = entry_mesh, ein, inv_e.ravel(), exit_mesh, xin
        else:
            g_mesh, g_dir, inv, o_mesh, o_dir = exit_mesh, xin, inv_x.ravel(), entry_mesh, ein
        order = np.argsort(inv, kind="stable")
        bounds = np.searchsorted(inv[order], np.arange(inv.max() + 2))
        if not hasattr(self, "_leg_key"):
            self._leg_key = self.leg_node.astype(np.int64) * len(self.mesh_points) + self.leg_mesh
        o_nbrs = self._mesh_neighbors(np.unique(o_mesh), tol.space)
        nbr_of = dict(zip(np.unique(o_mesh).tolist(), o_nbrs))
        out_q, out_t = [], []
        for g in range(len(bounds) - 1):
            qs = order[bounds[g]:bounds[g + 1]]
            if len(qs) == 0:
                continue
            q0 = qs[0]
            G = self._legs_near(self.mesh_points[g_mesh[q0]], g_dir[q0], tol)
            if len(G) == 0:
                continue
            # expand queries over neighbouring mesh points of the other side
            qq, om = [], []
            for q in qs:
                nb = nbr_of[int(o_mesh[q])]
                qq.extend([q] * len(nb))
                om.extend(nb)
            qq = np.asarray(qq)
            om = np.asarray(om, np.int32)
            # all (leg in G, neighbour query) pairs through the sorted (node, mesh) key
            M = len(self.mesh_points)
            keys = self.leg_node[G].astype(np.int64)[:, None] * M + om[None, :]
            pos = np.minimum(np.searchsorted(self._leg_key, keys), len(self._leg_key) - 1)
            hit = self._leg_key[pos] == keys
            if not np.any(hit):
                continue
            gi, qi = np.nonzero(hit)
            legs = pos[gi, qi]
            qh = qq[qi]
            ang = _angle(self.mesh_metric[om[qi]], self.leg_dir[legs].astype(float), o_dir[qh])
            ok = ang <= tol.angle
            out_q.append(qh[ok])
            out_t.append(self.leg_len[G[gi[ok]]] + self.leg_len[legs[ok]])
        if not out_q:
            return np.zeros(0, int), np.zeros(0)
        return np.concatenate(out_q), np.concatenate(out_t)

    def holds_many(self, entry_mesh, entry_dir, exit_mesh, exit_dir, t, tol: Optional[Tolerances] = None):
        """Vectorised :meth:`holds` for lattice queries at mesh points."""
        tol = tol or self.tol
        t = np.broadcast_to(np.asarray(t, float), (len(entry_mesh),))
        q, te = self.match_events(entry_mesh, entry_dir, exit_mesh, exit_dir, tol)
        ok = np.zeros(len(entry_mesh), bool)
        good = np.abs(te - t[q]) <= tol.time
        ok[q[good]] = True
        return ok

    # -- event access --------------------------------------------------
    def lattice_event(self, a: int, b: int) -> BrokenEvent:
        if self.leg_node[a] != self.leg_node[b]:
            raise ValueError("legs belong to different nodes")
        node = self.leg_node[a]
        return BrokenEvent(self.mesh_points[self.leg_mesh[a]].copy(), self.leg_dir[a].astype(float),
                           self.mesh_points[self.leg_mesh[b]].copy(), -self.leg_dir[b].astype(float),
                           float(self.leg_len[a] + self.leg_len[b]), self.node_pos[node].copy(),
                           float(self.leg_len[a]))

    def explicit_event(self, k: int) -> BrokenEvent:
        sc = None if self.ev_scatter is None else np.asarray(self.ev_scatter[k], float)
        s1 = None if self.ev_s1 is None else float(self.ev_s1[k])
        return BrokenEvent(self.ev_x[k].copy(), self.ev_xi[k].copy(), self.ev_y[k].copy(),
                           self.ev_zeta[k].copy(), float(self.ev_t[k]), sc, s1)

    def sample_lattice_pairs(self, k: int, rng: np.random.Generator):
        """Random (a, b) leg pairs sharing a node, uniform over events."""
        deg = np.diff(self.leg_indptr).astype(float)
        p = deg ** 2 / np.sum(deg ** 2)
        nodes = rng.choice(self.n_nodes, size=k, p=p)
        lo = self.leg_indptr[nodes]
        d = np.diff(self.leg_indptr)[nodes]
        a = lo + (rng.random(k) * d).astype(np.int64)
        b = lo + (rng.random(k) * d).astype(np.int64)
        return a, b

    def events(self):
        """Iterate over all events (lattice events first); intended for small relations."""
        for node in range(self.n_nodes):
            lo, hi = self.leg_indptr[node], self.leg_indptr[node + 1]
            for a in range(lo, hi):
                for b in range(lo, hi):
                    yield self.lattice_event(a, b)
        for k in range(self.n_explicit):
            yield self.explicit_event(k)

    def explicit_arrays(self):
        """All events as arrays ``(x, xi, y, zeta, t)``; lattice pairs are enumerated."""
        xs, xis, ys, zs, ts = [self.ev_x], [self.ev_xi], [self.ev_y], [self.ev_zeta], [self.ev_t]
        if self.n_legs:
            deg = np.diff(self.leg_indptr)
            nodes = np.repeat(np.arange(self.n_nodes), deg ** 2)
            lo = np.repeat(self.leg_indptr[:-1], deg ** 2)
            dd = np.repeat(deg, deg ** 2)
            within = np.arange(len(nodes)) - np.repeat(np.concatenate([[0], np.cumsum(deg ** 2)[:-1]]), deg ** 2)
            a = lo + within // dd
            b = lo + within % dd
            xs.insert(0, self.mesh_points[self.leg_mesh[a]])
            xis.insert(0, self.leg_dir[a].astype(float))
            ys.insert(0, self.mesh_points[self.leg_mesh[b]])
            zs.insert(0, -self.leg_dir[b].astype(float))
            ts.insert(0, self.leg_len[a] + self.leg_len[b])
        return tuple(np.concatenate(v) for v in (xs, xis, ys, zs, ts))

    def with_tolerances(self, tol: Tolerances) -> "BrokenRelation":
        other = object.__new__(BrokenRelation)
        other.__dict__.update(self.__dict__)
        other.tol = tol
        return other


def mu1_from_relation(rel: BrokenRelation, z, xi, tol: Optional[Tolerances] = None) -> float:
    """Exit length read off the self-relation ladder at ``(z, xi)``."""
    tol = tol or rel.tol
    legs = rel._legs_near(z, xi, tol)
    ts = [2.0 * rel.leg_len[legs]]
    if rel.ev_tree is not None:
        k = rel._explicit_match((z, xi), (z, -np.asarray(xi, float)), tol)
        ts.append(rel.ev_t[k])
    ts = np.concatenate(ts)
    if ts.size == 0:
        raise CoverageError("no self-relation events at this boundary state",
                            diagnostics={"z": np.asarray(z).tolist()})
    return float(np.max(ts) / 2.0)


# ---------------------------------------------------------------------------
# generation

def _normal_ray_nodes(spec: ManifoldSpec, points, normals, spacing, max_depth=None, depths=None):
    """Points on inward normal rays at multiples of ``spacing`` (or at ``depths``)."""
    from .geodesic.flow import shoot, trap_budget
    k_sub = max(1, int(np.ceil(spacing / spec.default_step)))
    step = spacing / k_sub
    if depths is not None:
        # shallow fixed depths: no exit lengths needed
        res = shoot(spec, np.repeat(points, len(depths), 0), np.repeat(normals, len(depths), 0),
                    np.tile(depths, len(points)), step)
        keep = (res.status != 1) & (spec.gap(res.x) > 1e-9)
        base = np.repeat(np.arange(len(points)), len(depths))[keep]
        return res.x[keep], base, np.tile(depths, len(points))[keep], None
    exit_res = shoot(spec, points, normals, trap_budget(spec), step)
    mu1 = np.where(exit_res.exited, exit_res.s, np.nan)
    top = mu1 if max_depth is None else np.minimum(mu1, max_depth)
    pos, base, depth = [], [], []

    def rec(s, X, V, idx):
        k = int(round(s[idx[0]] / step))
        if k % k_sub == 0:
            sv = k // k_sub * spacing
            ok = idx[(sv < top[idx] - 1e-9) & (spec.gap(X[idx]) > 1e-9)]
            pos.append(X[ok])
            base.append(ok)
            depth.append(np.full(len(ok), sv))

    shoot(spec, points, normals, np.nan_to_num(top, nan=0.0) + step, step, stop_at_boundary=True, recorder=rec)
    pos = np.concatenate(pos)
    base = np.concatenate(base)
    depth = np.concatenate(depth)
    order = np.lexsort((depth, base))
    return pos[order], base[order], depth[order], mu1


def _attach_legs(spec, mesh_points, mesh_normals, node_pos, targets=None, chunk=1024):
    """Legs from every node to its target mesh points (all points by default)."""
    from .geodesic.legs import leg_solver
    solver = leg_solver(spec)
    m = len(mesh_points)
    g = spec.metric(mesh_points)
    N = len(node_pos)
    if targets is None:
        rows_l, cols_l, L_l, D_l = [], [], [], []
        for c0 in range(0, N, chunk):
            X = node_pos[c0:c0 + chunk]
            L, D = solver(X, mesh_points)
            r, c = np.nonzero(np.isfinite(L))
            rows_l.append(r + c0)
            cols_l.append(c)
            L_l.append(L[r, c])
            D_l.append(D[r, c])
        rows = np.concatenate(rows_l) if rows_l else np.zeros(0, int)
        cols = np.concatenate(cols_l) if cols_l else np.zeros(0, int)
        L = np.concatenate(L_l) if L_l else np.zeros(0)
        D = np.concatenate(D_l) if D_l else np.zeros((0, spec.dimension))
    else:
        counts = np.array([len(t) for t in targets], int)
        rows = np.repeat(np.arange(N), counts)
        cols = np.concatenate([np.asarray(t, int) for t in targets]) if N else np.zeros(0, int)
        L, D = solver.pairs(node_pos[rows], mesh_points[cols])
        ok = np.isfinite(L)
        rows, cols, L, D = rows[ok], cols[ok], L[ok], D[ok]
    cosn = np.einsum("ki,kij,kj->k", np.nan_to_num(D), g[cols], mesh_normals[cols])
    keep = cosn >= TANGENTIAL_CUTOFF
    rows, cols, L, D = rows[keep], cols[keep], L[keep], D[keep]
    order = np.lexsort((cols, rows))
    rows, cols, L, D = rows[order], cols[order], L[order], D[order]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=N))]).astype(np.int64)
    return indptr, cols.astype(np.int32), L, D.astype(np.float32)


def default_tolerances(mesh, depth_spacing, angle=0.02) -> Tolerances:
    _, nn = mesh.tree.query(mesh.points, k=2)
    coord_spacing = float(np.median(np.linalg.norm(mesh.points - mesh.points[nn[:, 1]], axis=1)))
    return Tolerances(space=0.5 * coord_spacing, angle=angle, time=2.0 * depth_spacing)


def generate_lattice(spec: ManifoldSpec, mesh, depth_spacing: float, tol: Optional[Tolerances] = None,
                     max_depth: Optional[float] = None, angle_tol: float = 0.02) -> BrokenRelation:
    """Normal-ray lattice: nodes every ``depth_spacing`` along each inward normal,
    legs from every node to every mesh point."""
    if depth_spacing <= 0:
        raise ValueError("depth spacing must be positive")
    pos, base, depth, mu1 = _normal_ray_nodes(spec, mesh.points, mesh.normals, depth_spacing, max_depth)
    indptr, leg_mesh, leg_len, leg_dir = _attach_legs(spec, mesh.points, mesh.normals, pos)
    tol = tol or default_tolerances(mesh, depth_spacing, angle_tol)
    params = {"kind": "lattice", "mesh_size": len(mesh), "depth_spacing": depth_spacing,
              "max_depth": max_depth, "dropped_rays": int(np.sum(~np.isfinite(mu1)))}
    return BrokenRelation(spec, tol, params=params, mesh_points=mesh.points, node_pos=pos,
                          node_base=base, node_depth=depth, leg_indptr=indptr, leg_mesh=leg_mesh,
                          leg_len=leg_len, leg_dir=leg_dir)


def generate_bounce(spec: ManifoldSpec, mesh, depth: float, reach: float,
                    tol: Optional[Tolerances] = None) -> BrokenRelation:
    """Short-time lattice: one shallow node per normal ray, legs to mesh points within ``reach``."""
    pos, base, dep, _ = _normal_ray_nodes(spec, mesh.points, mesh.normals, depth, depths=np.array([depth]))
    targets = [np.asarray(sorted(t), int) for t in mesh.tree.query_ball_point(pos, reach)]
    indptr, leg_mesh, leg_len, leg_dir = _attach_legs(spec, mesh.points, mesh.normals, pos, targets)
    tol = tol or default_tolerances(mesh, depth, 0.02)
    params = {"kind": "bounce", "mesh_size": len(mesh), "depth": depth, "reach": reach}
    return BrokenRelation(spec, tol, params=params, mesh_points=mesh.points, node_pos=pos,
                          node_base=base, node_depth=dep, leg_indptr=indptr, leg_mesh=leg_mesh,
                          leg_len=leg_len, leg_dir=leg_dir)


def entry_grid(spec: ManifoldSpec, mesh, angles=(0.0,), azimuths: int = 1):
    """Boundary entry states: mesh points times tilts from the normal."""
    from .geodesic.jacobi import orthonormal_complement
    X, XI = [], []
    for z, nu in zip(mesh.points, mesh.normals):
        E = orthonormal_complement(spec, z, nu)
        for a in angles:
            if a == 0.0:
                X.append(z)
                XI.append(nu)
                continue
            for k in range(azimuths):
                phi = 2 * np.pi * k / azimuths
                t = np.cos(phi) * E[0] + (np.sin(phi) * E[1] if len(E) > 1 else 0.0)
                X.append(z)
                XI.append(np.cos(a) * nu + np.sin(a) * t)
    return np.array(X), np.array(XI)


def scatter_points(spec: ManifoldSpec, X, XI, spacing: float, step=None):
    """Points along entry rays at multiples of ``spacing`` before exit.

    Returns ``(points, entry_index, s1)``.
    """
    from .geodesic.flow import shoot, trap_budget
    step = step or spec.default_step
    k_sub = max(1, int(np.ceil(spacing / step)))
    h = spacing / k_sub
    out_p, out_i, out_s = [], [], []

    def rec(s, Xs, V, idx):
        k = int(round(s[idx[0]] / h))
        if k % k_sub == 0:
            ok = idx[spec.gap(Xs[idx]) > 1e-9]
            ok = ok[np.abs(s[ok] - k * h) < 1e-12]
            out_p.append(Xs[ok])
            out_i.append(ok)
            out_s.append(s[ok])

    shoot(spec, X, XI, trap_budget(spec), h, recorder=rec)
    if not out_p:
        return np.zeros((0, spec.dimension)), np.zeros(0, int), np.zeros(0)
    return np.concatenate(out_p), np.concatenate(out_i), np.concatenate(out_s)


def generate(spec: ManifoldSpec, entries, scatter_spacing: float, directions: int,
             tol: Optional[Tolerances] = None, include_reversal: bool = True, step=None,
             chunk: int = 20000) -> BrokenRelation:
    """Ray-sampled relation.

    Each entry ray is followed and scattered at multiples of
    ``scatter_spacing``; from each scatter point ``directions`` outgoing
    directions (plus the reversal of the incoming one) are followed to the
    boundary.  Near-tangential entries/exits and trapped rays are dropped and
    counted in ``params``.
    """
    from .geodesic.flow import exit_batch, shoot
    from .geodesic.oracles import fibonacci_sphere
    X, XI = entries
    X = np.asarray(X, float)
    XI = spec.normalize(X, np.asarray(XI, float))
    cos_in = spec.inner(X, XI, spec.normal_field(X))
    good = cos_in >= TANGENTIAL_CUTOFF
    dropped_entries = int(np.sum(~good))
    X, XI = X[good], XI[good]
    P, I, S1 = scatter_points(spec, X, XI, scatter_spacing, step)
    # incoming velocity at the scatter point
    Vin = shoot(spec, X[I], XI[I], S1, step or spec.default_step, stop_at_boundary=False).v if len(I) else np.zeros((0, spec.dimension))
    dirs = fibonacci_sphere(directions, spec.dimension) if directions else np.zeros((0, spec.dimension))
    ev = {k: [] for k in ("x", "xi", "y", "zeta", "t", "scatter", "s1")}
    trapped = 0
    tangential = 0
    for c0 in range(0, len(P), max(1, chunk // max(1, len(dirs) + 1))):
        sl = slice(c0, c0 + max(1, chunk // max(1, len(dirs) + 1)))
        Pc, Ic, Sc, Vc = P[sl], I[sl], S1[sl], Vin[sl]
        k = len(dirs) + (1 if include_reversal else 0)
        PP = np.repeat(Pc, k, 0)
        ETA = np.concatenate([np.broadcast_to(dirs, (len(Pc), len(dirs), spec.dimension)),
                              (-Vc)[:, None, :]] if include_reversal else
                             [np.broadcast_to(dirs, (len(Pc), len(dirs), spec.dimension))], axis=1)
        ETA = ETA.reshape(-1, spec.dimension)
        res = exit_batch(spec, PP, ETA, step)
        ok = res.exited
        trapped += int(np.sum(~ok))
        cos_out = -spec.inner(res.x, res.v, spec.normal_field(res.x))
        tang = ok & (cos_out < TANGENTIAL_CUTOFF)
        tangential += int(np.sum(tang))
        ok &= ~tang
        ent = np.repeat(Ic, k)
        ev["x"].append(X[ent][ok])
        ev["xi"].append(XI[ent][ok])
        ev["y"].append(res.x[ok])
        ev["zeta"].append(res.v[ok])
        ev["t"].append(np.repeat(Sc, k)[ok] + res.s[ok])
        ev["scatter"].append(PP[ok])
        ev["s1"].append(np.repeat(Sc, k)[ok])
    n = spec.dimension
    ev = {key: (np.concatenate(v) if v else np.zeros((0, n) if key not in ("t", "s1") else 0))
          for key, v in ev.items()}
    if tol is None:
        ang = float(np.sqrt(4 * np.pi / max(directions, 1))) if n == 3 else 2 * np.pi / max(directions, 1)
        tol = Tolerances(space=1e-6, angle=2 * ang, time=2 * scatter_spacing)
    params = {"kind": "rays", "entries": int(len(X)), "scatter_spacing": scatter_spacing,
              "directions": directions, "dropped_tangential": tangential + dropped_entries,
              "dropped_trapped": trapped}
    return BrokenRelation(spec, tol, params=params, events=ev)


# ---------------------------------------------------------------------------
# consistency checks

def sample_events(rel: BrokenRelation, k: int, rng: np.random.Generator):
    """``k`` random events as arrays ``(x, xi, y, zeta, t, scatter, s1)`` (lattice and explicit)."""
    n_lat = rel.n_events - rel.n_explicit
    k_lat = int(round(k * n_lat / max(rel.n_events, 1)))
    out = []
    if k_lat:
        a, b = rel.sample_lattice_pairs(k_lat, rng)
        out.append((rel.mesh_points[rel.leg_mesh[a]], rel.leg_dir[a].astype(float),
                    rel.mesh_points[rel.leg_mesh[b]], -rel.leg_dir[b].astype(float),
                    rel.leg_len[a] + rel.leg_len[b], rel.node_pos[rel.leg_node[a]], rel.leg_len[a]))
    if k - k_lat and rel.n_explicit:
        e = rng.integers(0, rel.n_explicit, k - k_lat)
        sc = None if rel.ev_scatter is None else np.asarray(rel.ev_scatter)[e]
        s1 = None if rel.ev_s1 is None else np.asarray(rel.ev_s1)[e]
        out.append((rel.ev_x[e], rel.ev_xi[e], rel.ev_y[e], rel.ev_zeta[e], rel.ev_t[e], sc, s1))
    if not out:
        raise CoverageError("relation has no events")
    if len(out) == 1:
        return out[0]
    return tuple(None if any(o[i] is None for o in out) else np.concatenate([o[i] for o in out])
                 for i in range(7))


def reversal_failures(rel: BrokenRelation, k: int, rng: np.random.Generator, factor: float = 2.0) -> int:
    """Sampled events whose time reversal is not found at ``factor`` times the tolerances."""
    x, xi, y, zeta, t, _, _ = sample_events(rel, k, rng)
    tol = rel.tol.scaled(factor)
    fails = 0
    on_mesh = rel.mesh_tree is not None
    if on_mesh:
        dx, ix = rel.mesh_tree.query(x)
        dy, iy = rel.mesh_tree.query(y)
        lat = (dx == 0) & (dy == 0)
    else:
        lat = np.zeros(len(t), bool)
    if np.any(lat):
        ok = rel.holds_many(iy[lat], -zeta[lat], ix[lat], -xi[lat], t[lat], tol)
        fails += int(np.sum(~ok))
    for j in np.nonzero(~lat)[0]:
        fails += not rel.holds((y[j], -zeta[j]), (x[j], -xi[j]), t[j], tol)
    return fails


def replay_errors(rel: BrokenRelation, k: int, rng: np.random.Generator, step=None) -> np.ndarray:
    """Exit-state error from re-integrating both legs of ``k`` sampled events.

    The first leg is shot from the entry for ``s1``; the outgoing direction
    at the scatter point is taken from the reversed second leg, which is then
    shot forward and compared with the stored exit ``(y, zeta)``.
    """
    from .geodesic.flow import shoot
    spec = rel.spec
    x, xi, y, zeta, t, _, s1 = sample_events(rel, k, rng)
    if s1 is None:
        raise CoverageError("events carry no scatter data to replay")
    s2 = t - s1
    h = step or spec.default_step
    p = shoot(spec, x, xi, s1, h, stop_at_boundary=False)
    back = shoot(spec, y, -zeta, s2, h, stop_at_boundary=False)
    fwd = shoot(spec, back.x, -back.v, s2, h, stop_at_boundary=False)
    meet = np.linalg.norm(p.x - back.x, axis=1)
    exit_err = np.maximum(np.linalg.norm(fwd.x - y, axis=1), np.linalg.norm(fwd.v - zeta, axis=1))
    return np.maximum(meet, exit_err)
