"""Distances and boundary distance functions recovered from broken relations.

* :func:`boundary_metric` builds the short-bounce graph ``d_N`` on a fine
  boundary mesh and runs Dijkstra from chosen mesh points.
* :func:`chord_table` mixes boundary-metric edges with one-scatter interior
  edges (minimum event time) into a graph whose shortest paths approximate
  interior distances between boundary points.
* :func:`rx_reconstruct` evaluates ``r_x = dist(x, .)`` on the mesh for the
  focus point ``x`` of a focusing family, from witness events through ``x``.
* :func:`assemble_representation` collects such functions over anchors and
  depths; :func:`hausdorff_compare` compares two such sets in sup-norm.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import DataError, ResolutionError
from .focusing import ACCEPT_FRACTION, FocusingFamily
from .relation import BrokenRelation, Tolerances, _angle, generate_bounce


@dataclass
class DistanceTable:
    D: np.ndarray               # (k, k) symmetric, zero diagonal
    points: np.ndarray          # (k, n)
    kind: str                   # "boundary" or "chord"
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def triangle_excess(self) -> np.ndarray:
        """Per (i, k): ``max_j (D[i, k] - D[i, j] - D[j, k])`` clipped at 0."""
        D = self.D
        worst = np.zeros_like(D)
        for j in range(len(D)):
            worst = np.maximum(worst, D - D[:, j][:, None] - D[j][None, :])
        return worst

    def triangle_violations(self, tol: float):
        """``(soft, hard)`` counts: excess in ``(tol, 2 tol]`` and above ``2 tol``."""
        e = self.triangle_excess()
        return int(np.sum((e > tol) & (e <= 2 * tol))), int(np.sum(e > 2 * tol))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"# kind={self.kind}"] + [f"{k}={v}" for k, v in self.params.items()])
            for row in self.D:
                w.writerow([f"{v:.12g}" for v in row])


@dataclass
class BoundaryDistanceFn:
    anchor: int                 # mesh index of z0
    t0: float
    r: np.ndarray               # (m,) values on the mesh
    flagged: np.ndarray         # (m,) entries without a direct witness (upper bounds only)
    witnesses: int = 0

    def lipschitz_excess(self, chord: DistanceTable) -> float:
        """``max |r_i - r_j| - chord_ij`` over unflagged pairs."""
        ok = ~self.flagged
        r = self.r[ok]
        C = chord.D[np.ix_(ok, ok)]
        return float(np.max(np.abs(r[:, None] - r[None, :]) - C)) if r.size else 0.0

    def to_csv(self, path, points):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"# anchor={self.anchor}", f"t0={self.t0}"])
            n = points.shape[1]
            w.writerow([f"z{i}" for i in range(n)] + ["r", "flagged"])
            for p, v, fl in zip(points, self.r, self.flagged):
                w.writerow([*map(float, p), float(v), int(fl)])


# ---------------------------------------------------------------------------
# boundary metric from short bounces

def _min_graph(I, J, T, m):
    """Symmetric sparse graph keeping the smallest weight per undirected edge."""
    a, b = np.minimum(I, J), np.maximum(I, J)
    key = a.astype(np.int64) * m + b
    order = np.lexsort((T, key))
    key, T = key[order], T[order]
    first = np.concatenate([[True], key[1:] != key[:-1]]) if len(key) else np.zeros(0, bool)
    key, T = key[first], T[first]
    a, b = key // m, key % m
    return coo_matrix((np.concatenate([T, T]), (np.concatenate([a, b]), np.concatenate([b, a]))),
                      shape=(m, m)).tocsr()


def bounce_scales(N: int, depth_coef: float = 0.05):
    """Probe reach ``eps^{3/4}`` and scatter depth ``depth_coef * eps^{5/4}`` for ``eps = 1/N``."""
    eps = 1.0 / N
    return eps ** 0.75, depth_coef * eps ** 1.25


def bounce_relation(spec, N: int, include=None, depth_coef: float = 0.05, density: float = 3.5):
    """Short-bounce relation at scale ``N`` on a refined mesh containing ``include`` points first."""
    from .mesh import refined_mesh
    reach, depth = bounce_scales(N, depth_coef)
    # coordinate length per unit metric length on the boundary
    Z = np.asarray(include, float) if include is not None else refined_mesh(spec, reach).points
    e = np.zeros_like(Z)
    e[:, 0] = 1.0
    scale = float(1.0 / np.min(spec.norm(Z, e)))
    mesh = refined_mesh(spec, reach * scale / density, include)
    rel = generate_bounce(spec, mesh, depth, reach * scale * 1.05)
    rel.params.update({"N": N, "probe_time": reach, "density": density})
    return rel


def boundary_metric(rel: BrokenRelation, N: int, targets=None,
                    exit_angle: Optional[float] = None) -> DistanceTable:
    """``d_N`` between ``targets`` (mesh indices, default all) of a bounce relation.

    Edges join an entry base ``y`` to an exit base ``y'`` with a near-normal
    exit, weighted by the event time, kept when below ``(1/N)^{3/4}``.
    """
    reach, _ = bounce_scales(N)
    atol = rel.tol.angle if exit_angle is None else exit_angle
    m = len(rel.mesh_points)
    I, J, T = rel.min_time_edges(exit_normal_tol=atol, t_max=reach, dense=False)
    keep = I != J
    I, J, T = I[keep], J[keep], T[keep]
    G = _min_graph(I, J, T, m)
    targets = np.arange(m) if targets is None else np.asarray(targets, int)
    D = dijkstra(G, directed=False, indices=targets)[:, targets]
    if not np.all(np.isfinite(D)):
        raise ResolutionError("bounce graph is disconnected; lower N or densify the relation")
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return DistanceTable(D, rel.mesh_points[targets], "boundary",
                         {"N": N, "edges": int(G.nnz // 2), "mesh": m})


# ---------------------------------------------------------------------------
# interior (chord) distances

def chord_table(rel: BrokenRelation, bmetric: DistanceTable) -> DistanceTable:
    """All-pairs shortest paths mixing boundary-metric edges and one-scatter edges.

    ``bmetric`` must be over ``rel``'s mesh points (same order).
    """
    m = len(rel.mesh_points)
    if len(bmetric) != m or not np.allclose(bmetric.points, rel.mesh_points):
        raise DataError("boundary metric is not over the relation mesh")
    I, J, T = rel.min_time_edges()
    E = np.full((m, m), np.inf)
    E[I, J] = T
    E = np.minimum(E, E.T)
    W = np.minimum(E, bmetric.D)
    np.fill_diagonal(W, 0.0)
    D = dijkstra(np.where(np.isfinite(W), W, 0.0), directed=False)
    if not np.all(np.isfinite(D)):
        raise ResolutionError("chord graph is disconnected")
    return DistanceTable(0.5 * (D + D.T), rel.mesh_points.copy(), "chord",
                         {"interior_edges": int(np.sum(np.isfinite(E)))})


def chord_distance(rel: BrokenRelation, bmetric: DistanceTable, i: int, j: int) -> float:
    return float(chord_table(rel, bmetric).D[i, j])


# ---------------------------------------------------------------------------
# boundary distance functions

def _witnesses(rel: BrokenRelation, family: FocusingFamily, tol: Tolerances, accept: float):
    """Entries ``(w1, eta1, s1)`` whose events reach every family point ``z``
    leaving along ``-xi(z)`` in time ``s1 + t(z)``."""
    F = family
    t0 = F.t0
    i0 = int(F.mesh_index[0])
    A = rel._legs_near(rel.mesh_points[i0], F.dirs[0], tol)
    # the witness breaks at the focus point: scatter nodes sit near x
    A = A[np.abs(rel.leg_len[A] - F.times[0]) <= tol.time]
    nodes, l0 = rel.leg_node[A], rel.leg_len[A]
    ranges = [np.arange(rel.leg_indptr[k], rel.leg_indptr[k + 1]) for k in nodes]
    legs = np.concatenate(ranges) if ranges else np.zeros(0, int)
    own = np.repeat(l0, [len(r) for r in ranges])
    w1 = rel.leg_mesh[legs].astype(int)
    eta = rel.leg_dir[legs].astype(float)
    s1 = rel.leg_len[legs] + own - t0
    keep = s1 >= t0 - tol.time
    w1, eta, s1 = w1[keep], eta[keep], s1[keep]
    # candidates closer than the tolerances are indistinguishable
    L = np.linalg.cholesky(rel.mesh_metric[w1])
    W = np.einsum("ki,kij->kj", eta, L)
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    key = np.column_stack([w1, np.floor(W / (0.5 * tol.angle)), np.floor(s1 / (0.5 * tol.time))])
    _, first = np.unique(key, axis=0, return_index=True)
    w1, eta, s1 = w1[first], eta[first], s1[first]
    g1 = rel.mesh_metric[w1]
    votes = np.zeros(len(w1))
    shift = np.zeros(len(w1))
    sq = np.zeros(len(w1))
    for j in range(len(F)):
        Bj = rel._legs_near(F.points[j], F.dirs[j], tol)
        Bj = Bj[np.abs(rel.leg_len[Bj] - F.times[j]) <= tol.time]
        dt = np.full(len(w1), np.inf)
        for q, lq in zip(rel.leg_node[Bj], rel.leg_len[Bj]):
            lo, hi = rel.leg_indptr[q], rel.leg_indptr[q + 1]
            block = rel.leg_mesh[lo:hi]
            pos = np.minimum(np.searchsorted(block, w1), len(block) - 1)
            hit = np.nonzero(block[pos] == w1)[0]
            if not len(hit):
                continue
            lg = lo + pos[hit]
            ang = _angle(g1[hit], rel.leg_dir[lg].astype(float), eta[hit])
            d = rel.leg_len[lg] + lq - s1[hit] - F.times[j]
            better = (ang <= tol.angle) & (np.abs(d) <= tol.time) & (np.abs(d) < np.abs(dt[hit]))
            dt[hit[better]] = d[better]
        ok = np.isfinite(dt)
        votes += ok
        if j == 0:
            anchor_dt = dt.copy()
        shift[ok] += dt[ok]
        sq[ok] += dt[ok] ** 2
    good = votes >= accept * len(F)
    # least-squares time offset over the patch refines the lattice-quantised s1
    mean = shift[good] / votes[good]
    spread = np.sqrt(np.maximum(sq[good] / votes[good] - mean ** 2, 0.0))
    return w1[good], eta[good], s1[good], mean, spread, anchor_dt[good]


def rx_reconstruct(rel: BrokenRelation, chord: DistanceTable, family: FocusingFamily,
                   tol: Optional[Tolerances] = None, accept: float = ACCEPT_FRACTION,
                   quantile: float = 0.25) -> BoundaryDistanceFn:
    """``r(w0) = min over witness bases w1 of chord(w0, w1) + s(w1)``.

    ``s(w1)`` is the ``quantile`` of the fitted witness times entering at
    ``w1`` (``quantile=0`` gives the plain infimum; a low quantile discards
    the few spurious early witnesses that slip through the tolerances).
    Entries without a witness entering at ``w0`` itself are flagged.
    """
    tol = tol or rel.tol
    if family.mesh_index is None:
        raise DataError("family must live on the relation mesh")
    w1, _, s1, mean, _, _ = _witnesses(rel, family, tol, accept)
    s1 = s1 + mean
    m = len(rel.mesh_points)
    if len(w1) == 0:
        return BoundaryDistanceFn(int(family.mesh_index[0]), family.t0, np.full(m, np.inf),
                                  np.ones(m, bool), 0)
    best = np.full(m, np.inf)
    order = np.lexsort((s1, w1))
    w1, s1 = w1[order], s1[order]
    starts = np.flatnonzero(np.concatenate([[True], w1[1:] != w1[:-1]]))
    ends = np.append(starts[1:], len(w1))
    for a, b in zip(starts, ends):
        best[w1[a]] = np.quantile(s1[a:b], quantile)
    src = np.nonzero(np.isfinite(best))[0]
    r = np.min(chord.D[:, src] + best[src][None, :], axis=1)
    return BoundaryDistanceFn(int(family.mesh_index[0]), family.t0, r, ~np.isfinite(best), int(len(w1)))


def assemble_representation(rel: BrokenRelation, chord: DistanceTable, anchors, depths: Callable,
                            family_source: Callable, dedupe: float = 0.0):
    """Boundary distance functions over ``anchors`` and ``depths(anchor)``.

    ``family_source(anchor, t0)`` returns a verified family or ``None``
    (skipped and counted).  Functions within ``dedupe`` in sup-norm of a
    kept one are dropped.
    """
    out, skipped = [], []
    for i in anchors:
        for t0 in depths(i):
            F = family_source(int(i), float(t0))
            if F is None:
                skipped.append((int(i), float(t0)))
                continue
            f = rx_reconstruct(rel, chord, F)
            if dedupe > 0 and any(_sup(f, g) <= dedupe for g in out):
                continue
            out.append(f)
    return out, skipped


def _sup(f: BoundaryDistanceFn, g: BoundaryDistanceFn) -> float:
    ok = ~(f.flagged | g.flagged)
    return float(np.max(np.abs(f.r[ok] - g.r[ok]))) if np.any(ok) else np.inf


def hausdorff_compare(A, B) -> float:
    """Symmetrised ``max over A of min over B`` of sup-norm distances (flagged entries ignored)."""
    if not A and not B:
        return 0.0
    if not A or not B:
        return np.inf
    if len(A[0].r) != len(B[0].r):
        raise DataError("representations live on different meshes")
    M = np.array([[_sup(f, g) for g in B] for f in A])
    return float(max(M.min(axis=1).max(), M.min(axis=0).max()))


def flagged_fraction(A) -> float:
    if not A:
        return 0.0
    return float(np.mean(np.concatenate([f.flagged for f in A])))


def analytic_representation(spec, mesh_points, anchors_t0) -> list:
    """Ground-truth ``r_x`` for focus points ``x = gamma_{z0, nu}(t0)`` (closed-form distances)."""
    from .geodesic.flow import shoot
    from .geodesic.legs import leg_solver
    solver = leg_solver(spec)
    if not solver.exact:
        raise DataError("analytic representation needs closed-form legs")
    out = []
    for i, t0 in anchors_t0:
        z = mesh_points[i]
        x = shoot(spec, z, spec.normal_field(z[None])[0], t0).x
        L, _ = solver(x, mesh_points)
        out.append(BoundaryDistanceFn(int(i), float(t0), L[0], np.zeros(len(mesh_points), bool)))
    return out
