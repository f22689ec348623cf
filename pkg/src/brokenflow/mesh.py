"""Boundary sample meshes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .errors import DomainError, ResolutionError
from .geodesic.oracles import fibonacci_sphere
from .manifold import BOUNDARY_TOL, ManifoldSpec


@dataclass
class BoundaryMesh:
    points: np.ndarray      # (m, n)
    normals: np.ndarray     # (m, n) inward unit normals
    edges: np.ndarray       # (e, 2) adjacency
    spacing: float          # median nearest-neighbour metric distance
    tree: cKDTree = field(repr=False, default=None)

    def __post_init__(self):
        if self.tree is None:
            self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    @property
    def dimension(self):
        return self.points.shape[1]

    def within(self, x, r):
        return np.array(sorted(self.tree.query_ball_point(np.asarray(x, float), r)), dtype=int)

    def nearest(self, x, k=1):
        d, i = self.tree.query(np.asarray(x, float), k=k)
        return d, i

    def index_of(self, z, tol=1e-9):
        d, i = self.tree.query(np.asarray(z, float))
        if d > tol:
            raise DomainError(f"{z} is not a mesh point")
        return int(i)

    def patch(self, i, size):
        """Indices of the ``size`` mesh points nearest to point ``i`` (``i`` first)."""
        _, idx = self.tree.query(self.points[i], k=min(size, len(self)))
        idx = np.atleast_1d(idx)
        return np.concatenate([[i], idx[idx != i]])[:size]


def _project_to_boundary(spec: ManifoldSpec, dirs, r_max):
    """Bisection along coordinate rays from the chart centre onto ``rho = 0``."""
    c = 0.5 * (spec.chart_lo + spec.chart_hi)
    lo = np.zeros(len(dirs))
    hi = np.full(len(dirs), r_max)
    if np.any(spec.gap(c + hi[:, None] * dirs) >= 0):
        raise ResolutionError("boundary is not inside the chart along some ray")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        inside = spec.gap(c + mid[:, None] * dirs) >= 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return c + lo[:, None] * dirs


def boundary_mesh(spec: ManifoldSpec, size: int) -> BoundaryMesh:
    """Nearly uniform boundary samples (golden spiral for spheres, equal angles in 2D)."""
    if not spec.has_boundary:
        raise DomainError("manifold has no boundary")
    if size < 4:
        raise ResolutionError("mesh needs at least 4 points")
    n = spec.dimension
    dirs = fibonacci_sphere(size, n)
    if spec.radius is not None:
        pts = dirs * spec.radius
    else:
        pts = _project_to_boundary(spec, dirs, 0.5 * spec.chart_diameter)
    if np.max(np.abs(spec.gap(pts))) > BOUNDARY_TOL:
        raise ResolutionError("mesh points are not on the boundary")
    normals = spec.normal_field(pts)
    if n == 2:
        i = np.arange(size)
        edges = np.stack([i, (i + 1) % size], axis=1)
    elif n == 3:
        hull = ConvexHull(dirs)
        tri = hull.simplices
        e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        e.sort(axis=1)
        edges = np.unique(e, axis=0)
    else:
        tree = cKDTree(pts)
        _, idx = tree.query(pts, k=2 * n + 1)
        e = np.stack([np.repeat(np.arange(size), 2 * n), idx[:, 1:].ravel()], axis=1)
        e.sort(axis=1)
        edges = np.unique(e, axis=0)
    tree = cKDTree(pts)
    _, nn = tree.query(pts, k=2)
    a, b = pts, pts[nn[:, 1]]
    mid = 0.5 * (a + b)
    spacing = float(np.median(spec.norm(mid, b - a)))
    return BoundaryMesh(pts, normals, edges, spacing, tree)


def mesh_from_points(spec: ManifoldSpec, points) -> BoundaryMesh:
    """Mesh over given boundary points (no adjacency)."""
    pts = np.asarray(points, float)
    if np.max(np.abs(spec.gap(pts))) > BOUNDARY_TOL:
        raise ResolutionError("mesh points are not on the boundary")
    tree = cKDTree(pts)
    _, nn = tree.query(pts, k=2)
    a, b = pts, pts[nn[:, 1]]
    spacing = float(np.median(spec.norm(0.5 * (a + b), b - a)))
    return BoundaryMesh(pts, spec.normal_field(pts), np.zeros((0, 2), int), spacing, tree)


def refined_mesh(spec: ManifoldSpec, spacing: float, include=None, dedupe: float = 0.25) -> BoundaryMesh:
    """Fine golden-spiral mesh of roughly ``spacing`` (coordinate units) plus ``include`` points.

    Fine points closer than ``dedupe * spacing`` to an included point are dropped,
    and included points come first.
    """
    if spec.radius is None:
        raise DomainError("refined meshes need a round boundary")
    n = spec.dimension
    area = 2 * np.pi * spec.radius if n == 2 else 4 * np.pi * spec.radius ** 2
    size = int(np.ceil(area / spacing)) if n == 2 else int(np.ceil(area / (0.866 * spacing ** 2)))
    pts = fibonacci_sphere(size, n) * spec.radius
    if include is not None and len(include):
        inc = np.asarray(include, float)
        d, _ = cKDTree(inc).query(pts)
        pts = np.vstack([inc, pts[d > dedupe * spacing]])
    return mesh_from_points(spec, pts)
