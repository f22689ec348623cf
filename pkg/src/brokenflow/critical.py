"""Critical distances along inward normal geodesics, read from relations.

``mu1`` is the exit length, ``mu2`` the first length at which normal
geodesics from nearby boundary points start meeting the one from ``z``, and
``tau_b`` the length up to which the normal geodesic stays the shortest path
to the boundary.  ``mu1``/``mu2``/``tau_b`` use relation queries only; the
focal and conjugate distances in a :class:`CriticalProfile` come from Jacobi
fields and serve as references.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CoverageError, DomainError
from .focusing import ACCEPT_FRACTION, FocusingFamily, FocusingSearch
from .relation import BrokenRelation, Tolerances, mu1_from_relation


@dataclass
class Mu2Estimate:
    value: float
    mu1: float
    deltas: np.ndarray
    counts: np.ndarray          # events seen at each scale
    degenerate: bool            # no crossing below mu1 (mu2 = mu1)


def _best_per_entry(ev):
    """Best-aligned event per entry base point."""
    mis = np.maximum(ev.entry_misfit, ev.exit_misfit)
    keys = np.round(ev.entry, 9)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    best = {}
    for k in np.argsort(mis, kind="stable"):
        best.setdefault(int(inv[k]), k)
    return np.array(sorted(best.values()), int)


def mu2(rel: BrokenRelation, i: int, levels: int = 4, angle_tol: Optional[float] = None) -> Mu2Estimate:
    """Estimate ``mu2`` at mesh point ``i`` from near-normal events of nearby bases.

    Scales ``delta_k`` halve down to the mesh spacing.  A half-time ``s`` from
    the best-aligned event of each neighbour at the finest scale qualifies if
    every scale holds an event with ``|T - 2 s| <= max(delta_k, time tol)``.
    ``mu2`` is the smallest qualifying ``s`` below ``mu1``, else ``mu1``.
    """
    tol = rel.tol
    atol = tol.angle if angle_tol is None else angle_tol
    z = rel.mesh_points[i]
    nu = rel.mesh_normals[i]
    m1 = mu1_from_relation(rel, z, nu)
    h = 2.0 * tol.space
    deltas = h * 2.0 ** np.arange(levels - 1, -1, -1) * 1.05
    evs = [rel.near_events(z, d, atol, exit_exact=True) for d in deltas]
    counts = np.array([len(e) for e in evs])
    fine = evs[-1]
    if len(fine) == 0:
        raise CoverageError("no near-normal events from neighbouring boundary points",
                            diagnostics={"mesh_index": int(i), "deltas": deltas.tolist()})
    cand = np.sort(fine.t[_best_per_entry(fine)] / 2.0)
    cand = cand[cand < m1 - tol.time]
    for s in cand:
        if all(np.any(np.abs(e.t - 2 * s) <= max(d, tol.time)) for e, d in zip(evs, deltas)):
            return Mu2Estimate(float(s), m1, deltas, counts, False)
    return Mu2Estimate(m1, m1, deltas, counts, True)


@dataclass
class TauBEstimate:
    value: float
    mu2: float
    grid: np.ndarray
    accepted: list = field(default_factory=list)     # (t0, witness mesh index, s0)
    no_family: list = field(default_factory=list)    # t0 values without a verified family


def _witness_candidates(rel: BrokenRelation, i: int, tol):
    """Events entering normally at ``i`` and leaving normally elsewhere: (mesh index, time)."""
    z = rel.mesh_points[i]
    A = rel._legs_near(z, rel.mesh_normals[i], tol)
    near = set(rel.mesh_tree.query_ball_point(z, tol.space)) | {i}
    W, T = [], []
    for a in A:
        k = rel.leg_node[a]
        lo, hi = rel.leg_indptr[k], rel.leg_indptr[k + 1]
        legs = np.arange(lo, hi)
        ok = rel.leg_normal_angle[legs] <= tol.angle
        legs = legs[ok]
        legs = legs[~np.isin(rel.leg_mesh[legs], list(near))]
        W.append(rel.leg_mesh[legs])
        T.append(rel.leg_len[a] + rel.leg_len[legs])
    if not W:
        return np.zeros(0, int), np.zeros(0)
    return np.concatenate(W).astype(int), np.concatenate(T)


def depth_grid(rel: BrokenRelation, i: int, angle: float = 1e-3) -> np.ndarray:
    """Half-times of the nearly exact normal self-relation ladder at mesh point ``i``.

    Values closer than a quarter of the time tolerance are merged.
    """
    lad = np.sort(rel.normal_ladder(i, angle) / 2.0)
    lad = lad[lad > 0]
    if lad.size == 0:
        raise CoverageError("no normal self-relation events", diagnostics={"mesh_index": int(i)})
    keep = np.concatenate([[True], np.diff(lad) > 0.25 * rel.tol.time])
    return lad[keep]


def tau_b_reconstruct(rel: BrokenRelation, i: int, mu2_value: Optional[float] = None,
                      family_source: Optional[Callable[[float], Optional[FocusingFamily]]] = None,
                      patch_size: int = 9, accept: float = ACCEPT_FRACTION,
                      margin: Optional[float] = None, witness_angle: float = 0.1) -> TauBEstimate:
    """Boundary cut distance at mesh point ``i`` from relation queries.

    ``t0`` runs over the normal self-relation ladder in ``(0, mu2]``.  A
    ``t0`` is accepted when a verified focusing family at ``(z, t0)`` has a
    witness: a boundary point ``w`` and ``s0 < t0 - margin`` such that every
    family geodesic continues to ``w`` and leaves there normally in time
    ``t(z') + s0``.  The estimate is the first accepted grid point minus half
    a grid step, or ``mu2`` when nothing is accepted.

    Witness queries use the angle tolerance scaled by ``witness_angle``:
    within the full tolerance, normals from nearby boundary points appear to
    meet early by roughly ``angle tol / separation``.
    """
    tol = rel.tol
    wtol = Tolerances(tol.space, tol.angle * witness_angle, tol.time)
    margin = 0.5 * tol.time if margin is None else margin
    if mu2_value is None:
        mu2_value = mu2(rel, i).value
    grid = depth_grid(rel, i)
    grid = grid[grid <= mu2_value + 1e-9]
    if family_source is None:
        family_source = FocusingSearch(rel, i, patch_size).family
    W, T = _witness_candidates(rel, i, wtol)
    out = TauBEstimate(float(mu2_value), float(mu2_value), grid)
    step = float(np.median(np.diff(grid))) if len(grid) > 1 else 0.0
    for t0 in grid:
        s0 = T - t0
        sel = (s0 > 0) & (s0 < t0 - margin)
        if not np.any(sel):
            continue
        F = family_source(float(t0))
        if F is None or F.mesh_index is None:
            out.no_family.append(float(t0))
            continue
        key = np.unique(np.column_stack([W[sel], np.round(s0[sel] / (0.5 * tol.time))]), axis=0)
        k = len(F)
        for w, _ in key:
            w = int(w)
            s_vals = s0[sel][W[sel] == w]
            for s in np.unique(np.round(s_vals, 6)):
                ok = rel.holds_many(F.mesh_index, F.dirs, np.full(k, w),
                                    np.repeat(-rel.mesh_normals[w][None], k, 0), F.times + s, wtol)
                if np.mean(ok) >= accept:
                    out.accepted.append((float(t0), w, float(s)))
                    break
            if out.accepted:
                break
        if out.accepted:
            out.value = float(t0 - 0.5 * step)
            break
    return out


# ---------------------------------------------------------------------------
# profiles over boundary points

@dataclass
class CriticalProfile:
    points: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    tau_b: np.ndarray            # nan when not computed
    tau_f: np.ndarray            # inf when no focal point before exit
    tau_c: np.ndarray            # inf when no conjugate point in the extension

    def columns(self):
        return {"mu1": self.mu1, "mu2": self.mu2, "tau_b": self.tau_b,
                "tau_f": self.tau_f, "tau_c": self.tau_c}

    def to_csv(self, path):
        n = self.points.shape[1]
        cols = self.columns()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"z{i}" for i in range(n)] + list(cols))
            for r in range(len(self.points)):
                w.writerow([*map(float, self.points[r])] + [float(c[r]) for c in cols.values()])

    def chain_holds(self, slack: float = 2e-2) -> np.ndarray:
        """Per point: ``tau_b <= mu2 <= min(mu1, tau_f)`` and ``tau_f < tau_c``, with ``slack``."""
        tb = np.where(np.isnan(self.tau_b), -np.inf, self.tau_b)
        both_inf = np.isinf(self.tau_f) & np.isinf(self.tau_c)
        return ((tb <= self.mu2 + slack) & (self.mu2 <= np.minimum(self.mu1, self.tau_f) + slack)
                & ((self.tau_f < self.tau_c) | both_inf))


def normal_conjugate_distances(spec, Z, s_max: Optional[float] = None):
    """Conjugate distance along the inward normal in the closed extension (``inf`` if none)."""
    from .geodesic.jacobi import conjugate_distance_batch
    ext = spec.extension()
    if ext is None:
        raise DomainError("manifold has no closed extension")
    Z = np.asarray(Z, float)
    nu = spec.normal_field(Z)
    s_max = ext.chart_diameter if s_max is None else s_max
    vals = conjugate_distance_batch(ext, Z, nu, s_max)
    return np.array([math.inf if v is None else v for v in vals])


def critical_profile(rel: BrokenRelation, indices, tau_b=None, reference: bool = True) -> CriticalProfile:
    """``mu1``/``mu2`` from ``rel`` at mesh ``indices``; ``tau_f``/``tau_c`` from Jacobi fields.

    ``tau_b`` may be an array (for example from a ground-truth oracle), the
    string ``"reconstruct"``, or ``None``.
    """
    from .geodesic.jacobi import focal_distance_batch
    indices = np.asarray(indices, int)
    Z = rel.mesh_points[indices]
    m2 = [mu2(rel, i) for i in indices]
    m1 = np.array([e.mu1 for e in m2])
    v2 = np.array([e.value for e in m2])
    if isinstance(tau_b, str) and tau_b == "reconstruct":
        tb = np.array([tau_b_reconstruct(rel, i, e.value).value for i, e in zip(indices, m2)])
    elif tau_b is None:
        tb = np.full(len(Z), np.nan)
    else:
        tb = np.asarray(tau_b, float)
    if reference:
        tf = np.array([math.inf if v is None else v for v in focal_distance_batch(rel.spec, Z)])
        tc = normal_conjugate_distances(rel.spec, Z)
    else:
        tf = np.full(len(Z), np.nan)
        tc = np.full(len(Z), np.nan)
    return CriticalProfile(Z, m1, v2, tb, tf, tc)
