"""Ground-truth distances and critical distances computed by forward methods only."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from ..errors import CapabilityError, GeometryError, ResolutionError
from ..manifold import ManifoldSpec, inward_normal
from .flow import UnitTangent, connect, shoot


def fibonacci_sphere(k: int, n: int = 3) -> np.ndarray:
    """Nearly uniform unit vectors (golden-spiral in 3D, equal angles in 2D)."""
    if n == 2:
        a = 2 * np.pi * (np.arange(k) + 0.5) / k
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if n != 3:
        rng = np.random.default_rng(0)
        v = rng.normal(size=(k, n))
        return v / np.linalg.norm(v, axis=1)[:, None]
    i = np.arange(k) + 0.5
    z = 1 - 2 * i / k
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _local_fan(center, width, k):
    """Directions within angle ``width`` of ``center`` (unit Euclidean vectors)."""
    n = center.size
    basis = np.linalg.svd(center[None])[2][1:]
    if n == 2:
        ang = np.linspace(-width, width, k)[:, None]
        return np.cos(ang) * center + np.sin(ang) * basis[0]
    u = fibonacci_sphere(k, n - 1) * np.sqrt(np.random.default_rng(1).uniform(0, 1, k))[:, None]
    u = np.vstack([np.zeros(n - 1), u]) * width
    ang = np.linalg.norm(u, axis=1, keepdims=True)
    d = np.where(ang > 0, u / np.maximum(ang, 1e-300), 0.0) @ basis
    return np.cos(ang) * center + np.sin(ang) * d


# ---------------------------------------------------------------------------
# distance to the boundary

def dist_to_boundary(spec: ManifoldSpec, x, fan: int = 400, rounds: int = 3, step=None) -> float:
    """Shortest exit length over all directions from ``x``.

    A direction fan is followed by shrinking local fans around the best ray.
    """
    if not spec.has_boundary:
        raise CapabilityError("manifold has no boundary")
    x = np.asarray(x, float)
    if spec.gap(x) <= 0:
        return 0.0
    n = x.size
    dirs = fibonacci_sphere(fan, n)
    width = math.sqrt(4 * math.pi / fan) if n == 3 else math.pi / fan
    best = math.inf
    best_dir = None
    budget = 20 * spec.chart_diameter
    for r in range(rounds + 1):
        X = np.broadcast_to(x, dirs.shape)
        res = shoot(spec, X, dirs, min(budget, best + 1e-9), step)
        ok = res.exited
        if np.any(ok):
            i = np.argmin(np.where(ok, res.s, np.inf))
            if res.s[i] < best:
                best, best_dir = float(res.s[i]), dirs[i]
        if best_dir is None:
            raise GeometryError("no direction reaches the boundary")
        dirs = _local_fan(best_dir, width, 60)
        width *= 0.15
    return best


# ---------------------------------------------------------------------------
# pairwise distance graph

@dataclass
class DistanceGraph:
    """k-NN sample graph of ``M`` with metric edge lengths."""

    spec: ManifoldSpec
    points: np.ndarray
    graph: csr_matrix
    tree: cKDTree
    k: int

    @classmethod
    def build(cls, spec: ManifoldSpec, n_samples: int = 20000, k: int = 12, seed: int = 0,
              n_boundary: Optional[int] = None) -> "DistanceGraph":
        rng = np.random.default_rng(seed)
        n = spec.dimension
        pts = []
        need = n_samples
        while need > 0:
            cand = rng.uniform(spec.chart_lo, spec.chart_hi, size=(4 * need, n))
            if spec.has_boundary:
                cand = cand[spec.gap(cand) > 0]
            pts.append(cand[:need])
            need -= len(pts[-1])
        P = np.vstack(pts)
        if spec.has_boundary and spec.radius is not None:
            nb = n_boundary if n_boundary is not None else int(n_samples ** ((n - 1) / n) * 2)
            B = fibonacci_sphere(nb, n) * spec.radius
            P = np.vstack([P, B])
        tree = cKDTree(P)
        return cls(spec, P, _knn_graph(spec, P, tree, k), tree, k)

    def shortest(self, x, y) -> float:
        x, y = np.asarray(x, float), np.asarray(y, float)
        m = len(self.points)
        Q = np.vstack([x, y])
        _, idx = self.tree.query(Q, k=self.k)
        rows = np.repeat([m, m + 1], self.k)
        cols = idx.ravel()
        w = segment_length(self.spec, Q[rows - m], self.points[cols])
        E = csr_matrix((w, (rows, cols)), shape=(m + 2, m + 2))
        G = self.graph.copy()
        G.resize((m + 2, m + 2))
        G = G + E + E.T
        d = dijkstra(G, directed=False, indices=m)
        val = d[m + 1]
        if not np.isfinite(val):
            raise ResolutionError("sample graph is disconnected; raise the sample count")
        direct = float(segment_length(self.spec, x[None], y[None])[0])
        if np.linalg.norm(y - x) <= np.max(np.linalg.norm(self.points[idx[0]] - x, axis=1)):
            val = min(val, direct)
        return float(val)


def segment_length(spec, A, B, nodes=5):
    """Metric length of coordinate segments ``A -> B`` by Gauss-Legendre quadrature."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (t + 1)
    w = 0.5 * w
    D = B - A
    tot = 0.0
    for ti, wi in zip(t, w):
        tot = tot + wi * spec.norm(A + ti * D, D)
    return tot


def _knn_graph(spec, P, tree, k):
    m = len(P)
    _, idx = tree.query(P, k=k + 1)
    rows = np.repeat(np.arange(m), k)
    cols = idx[:, 1:].ravel()
    w = segment_length(spec, P[rows], P[cols])
    G = csr_matrix((w, (rows, cols)), shape=(m, m))
    return G.maximum(G.T)


_GRAPH_CACHE: dict = {}


def distance_oracle(spec: ManifoldSpec, x, y, n_samples: int = 20000, k: int = 12,
                    refine: bool = True, seed: int = 0) -> float:
    """Geodesic distance by graph search refined with two-point shooting.

    The shooting result replaces the graph value only when it is shorter, so
    the estimate never exceeds the graph upper bound.
    """
    key = (spec.spec_hash, n_samples, k, seed)
    if key not in _GRAPH_CACHE:
        _GRAPH_CACHE[key] = DistanceGraph.build(spec, n_samples, k, seed)
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.allclose(x, y):
        return 0.0
    d_graph = _GRAPH_CACHE[key].shortest(x, y)
    if not refine:
        return d_graph
    try:
        _, L, _ = connect(spec, x, y)
    except GeometryError:
        return d_graph
    return L if L <= d_graph + 1e-12 else d_graph


# ---------------------------------------------------------------------------
# cut distances

def _first_defect(s, d, tol):
    """Largest grid parameter before ``d(s) < s - tol`` first happens."""
    bad = np.nonzero(d < s - tol)[0]
    if bad.size == 0:
        return None
    return int(bad[0])


def cut_distance(spec: ManifoldSpec, start: UnitTangent, s_max: Optional[float] = None,
                 samples: int = 400, tol: float = 1e-6) -> float:
    """Largest ``s`` with ``dist(x, gamma(s)) = s`` in the closed extension.

    Uses the extension's analytic distance; returns ``inf`` when the geodesic
    stays minimising over ``s_max``.
    """
    ext = spec.extension() if spec.has_boundary else spec
    if ext is None or "distance" not in ext.oracles:
        raise CapabilityError("cut distance needs a closed extension with a distance oracle")
    dist = ext.oracles["distance"]
    x0 = np.asarray(start.x, float)
    s_max = s_max if s_max is not None else ext.chart_diameter
    ss, xs = [], []

    def rec(sv, X, V, idx):
        ss.append(sv[0])
        xs.append(X[0])

    shoot(ext, x0, start.xi, s_max, stop_at_boundary=False, recorder=rec, step=min(ext.default_step, s_max / samples))
    ss, xs = np.array(ss), np.array(xs)
    d = np.array([dist(x0, p) for p in xs])
    k = _first_defect(ss, d, tol)
    if k is None:
        return math.inf
    # bisection on the defect between the last good and first bad sample
    lo = ss[k - 1] if k > 0 else 0.0
    hi = ss[k]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        p = shoot(ext, x0, start.xi, mid, stop_at_boundary=False).x[0]
        if dist(x0, p) < mid - tol:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def boundary_cut_distance(spec: ManifoldSpec, z, coarse: float = 0.05, tol: float = 1e-5,
                          use_oracle_distance: bool = False) -> float:
    """Largest ``s`` with ``dist(gamma_{z,nu}(s), boundary) = s``.

    ``dist`` to the boundary comes from :func:`dist_to_boundary` unless
    ``use_oracle_distance`` selects an analytic oracle of the spec.
    """
    z = np.asarray(z, float)
    nu = inward_normal(spec, z)
    if use_oracle_distance and "dist_to_boundary" in spec.oracles:
        dtb = spec.oracles["dist_to_boundary"]
    else:
        def dtb(p):
            return dist_to_boundary(spec, p)
    res = shoot(spec, z, nu, 20 * spec.chart_diameter)
    mu1 = float(res.s[0])

    def point(s):
        return shoot(spec, z, nu, s).x[0]

    lo, hi = 0.0, None
    s = coarse
    while s < mu1:
        if dtb(point(s)) < s - tol:
            hi = s
            break
        lo = s
        s += coarse
    if hi is None:
        hi = mu1
    for _ in range(30):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        if dtb(point(mid)) < mid - tol:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _dist_by_legs(legs, X, B, radius, rounds=3):
    """Distance from points ``X`` to a round boundary of coordinate radius ``radius``.

    Minimum over dense boundary samples ``B``, then shrinking local fans around
    the best sample.
    """
    L, _ = legs(X, B)
    j = np.nanargmin(L, axis=1)
    best = L[np.arange(len(X)), j]
    centers = B[j] / radius
    n = B.shape[1]
    width = 3.0 * math.sqrt(4 * math.pi / len(B)) if n == 3 else 3 * math.pi / len(B)
    rows = np.arange(len(X))
    for _ in range(rounds):
        fans = np.stack([_local_fan(c, width, 120 if n == 3 else 41) for c in centers]) * radius
        Lf, _ = legs.pairs(X[:, None, :], fans)
        k = np.nanargmin(Lf, axis=1)
        better = Lf[rows, k] < best
        best[better] = Lf[rows, k][better]
        centers[better] = fans[rows, k][better] / radius
        width *= 0.1
    return best


def boundary_cut_distances(spec: ManifoldSpec, Z, n_boundary: int = 4000, coarse: float = 0.02,
                           tol: float = 1e-5) -> np.ndarray:
    """:func:`boundary_cut_distance` for many boundary points using exact legs.

    Requires a round boundary and a closed-form leg solver.
    """
    from .legs import leg_solver

    if spec.radius is None:
        raise CapabilityError("fast boundary cut distance needs a round boundary")
    legs = leg_solver(spec)
    if not legs.exact:
        raise CapabilityError("fast boundary cut distance needs closed-form legs")
    Z = np.atleast_2d(np.asarray(Z, float))
    B = fibonacci_sphere(n_boundary, spec.dimension) * spec.radius
    m = len(Z)
    NU = spec.normal_field(Z)
    # trace all normal rays once, keeping every step
    hist_s, hist_x, hist_v = [np.zeros(m)], [Z.copy()], [NU.copy()]

    def rec(sv, X, V, idx):
        hist_s.append(sv.copy())
        hist_x.append(X.copy())
        hist_v.append(V.copy())

    res = shoot(spec, Z, NU, 20 * spec.chart_diameter, recorder=rec)
    mu1 = res.s.copy()
    S = np.array(hist_s)            # (steps, m); frozen rays repeat their last state
    Xh = np.array(hist_x)
    Vh = np.array(hist_v)

    def points(svals):
        """States at arclength ``svals[i]`` along ray ``i``."""
        j = np.array([max(int(np.searchsorted(S[:, i], v)) - 1, 0) for i, v in enumerate(svals)])
        cols = np.arange(m)
        x0, v0, s0 = Xh[j, cols], Vh[j, cols], S[j, cols]
        ds = np.maximum(svals - s0, 0.0)
        out = x0.copy()
        move = ds > 0
        if np.any(move):
            out[move] = shoot(spec, x0[move], v0[move], ds[move], stop_at_boundary=False).x
        return out

    out = mu1.copy()
    lo = np.zeros(m)
    hi = np.full(m, np.nan)
    grid = np.arange(coarse, float(np.max(mu1)) + coarse, coarse)
    for i in range(m):
        g = grid[grid < mu1[i]]
        if g.size == 0:
            continue
        X = points_single(S[:, i], Xh[:, i], Vh[:, i], g, spec)
        d = _dist_by_legs(legs, X, B, spec.radius, rounds=1)
        k = _first_defect(g, d, 1e-3)
        if k is None:
            continue
        lo[i] = g[k - 1] if k > 0 else 0.0
        hi[i] = g[k]
    act = np.isfinite(hi)
    while np.any(act) and np.max(hi[act] - lo[act]) > tol:
        mid = np.where(act, 0.5 * (lo + np.nan_to_num(hi)), 0.0)
        idx = np.nonzero(act)[0]
        P = points(np.where(act, mid, 0.0))[idx]
        d = _dist_by_legs(legs, P, B, spec.radius, rounds=2)
        short = d < mid[idx] - tol
        hi[idx[short]] = mid[idx[short]]
        lo[idx[~short]] = mid[idx[~short]]
        act = np.isfinite(hi) & (hi - lo > tol)
    done = np.isfinite(hi)
    out[done] = 0.5 * (lo[done] + hi[done])
    return out


def points_single(S, X, V, svals, spec):
    """States at arclengths ``svals`` along one recorded ray."""
    j = np.maximum(np.searchsorted(S, svals) - 1, 0)
    ds = svals - S[j]
    out = X[j].copy()
    move = ds > 0
    if np.any(move):
        out[move] = shoot(spec, X[j][move], V[j][move], ds[move], stop_at_boundary=False).x
    return out
