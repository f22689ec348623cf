"""Singularity-level transport: ballistic and once-scattered arrivals.

A scene places sources in the collar ``U = {r_M < |x| < R}`` around ``M``
and observes arrivals on the outer sphere ``|x| = R``.  Each arrival carries
its time and principal amplitudes ``a(k)`` on a grid of Laplace parameters;
``-log a(k)`` is affine in ``k`` with slope equal to the travel time, which
:func:`exponent_fit` reads off.  :func:`relation_from_arrivals` clips the
exterior legs and returns a broken scattering relation with transport
provenance.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import BudgetError, DataError, DomainError
from .geodesic.flow import EXITED, GeodesicPath, UnitTangent, integrate, shoot, trap_budget
from .geodesic.oracles import fibonacci_sphere
from .manifold import ManifoldSpec
from .relation import TANGENTIAL_CUTOFF, BrokenRelation, Tolerances

DEFAULT_K = (1.0, 2.0, 4.0, 8.0)
_GL_T, _GL_W = np.polynomial.legendre.leggauss(3)
_GL_T = 0.5 * (_GL_T + 1.0)
_GL_W = 0.5 * _GL_W


# ---------------------------------------------------------------------------
# coefficients

@dataclass(frozen=True)
class Attenuation:
    """``sigma(x) = c0 + c2 |x|^2`` (1/length)."""
    c0: float = 0.0
    c2: float = 0.0

    def __call__(self, X):
        X = np.asarray(X, float)
        return self.c0 + self.c2 * np.sum(X * X, axis=-1)

    @property
    def label(self):
        return f"sigma:{self.c0}+{self.c2}r2"


@dataclass(frozen=True)
class Kernel:
    """``K(x, eta, xi) = scale * (1 + aniso * <eta, xi>_e / 2)`` inside ``M``, zero outside."""
    spec: ManifoldSpec
    scale: float = 1.0
    aniso: float = 0.0

    def __post_init__(self):
        if self.scale <= 0 or abs(self.aniso) >= 2:
            raise DomainError("kernel must stay positive inside M")

    def __call__(self, X, ETA, XI):
        X = np.asarray(X, float)
        e = np.asarray(ETA, float)
        v = np.asarray(XI, float)
        c = np.sum(e * v, -1) / (np.linalg.norm(e, axis=-1) * np.linalg.norm(v, axis=-1))
        val = self.scale * (1.0 + 0.5 * self.aniso * c)
        return np.where(self.spec.gap(X) > 0, val, 0.0)

    @property
    def label(self):
        return f"K:{self.scale}:{self.aniso}"


# ---------------------------------------------------------------------------
# scene

class _Shell:
    """Stand-in spec whose 'boundary' is the first crossing of ``|x| = r_M`` or ``|x| = R``."""

    def __init__(self, spec: ManifoldSpec, outer: float):
        self.base = spec
        self.r_m = float(spec.radius)
        self.outer = float(outer)
        self.dimension = spec.dimension
        self.has_boundary = True
        self.default_step = spec.default_step
        half = 1.25 * self.outer
        self.chart_lo = np.full(spec.dimension, -half)
        self.chart_hi = np.full(spec.dimension, half)

    def gap(self, X):
        r = np.linalg.norm(np.asarray(X, float), axis=-1)
        return np.minimum(self.outer - r, r - self.r_m)

    def in_chart(self, X):
        X = np.asarray(X, float)
        return np.all((X >= self.chart_lo) & (X <= self.chart_hi), axis=-1)

    def __getattr__(self, name):
        return getattr(self.base, name)


class _Outer(_Shell):
    """Whole region ``|x| < R``: only the outer sphere stops rays."""

    def gap(self, X):
        return self.outer - np.linalg.norm(np.asarray(X, float), axis=-1)


@dataclass
class TransportScene:
    spec: ManifoldSpec
    sources_x: np.ndarray          # (s, n) in the collar
    sources_xi: np.ndarray         # (s, n) unit directions
    observe_radius: float
    sigma: Attenuation = field(default_factory=Attenuation)
    kernel: Optional[Kernel] = None
    k_grid: tuple = DEFAULT_K

    def __post_init__(self):
        spec = self.spec
        if spec.radius is None:
            raise DomainError("transport scenes need a round boundary")
        if self.observe_radius <= spec.radius:
            raise DomainError("observation sphere must enclose M")
        self.sources_x = np.atleast_2d(np.asarray(self.sources_x, float))
        self.sources_xi = spec.normalize(self.sources_x, np.atleast_2d(np.asarray(self.sources_xi, float)))
        r = np.linalg.norm(self.sources_x, axis=1)
        if np.any(r < spec.radius) or np.any(r >= self.observe_radius):
            raise DomainError("sources must lie in the collar")
        if self.kernel is None:
            self.kernel = Kernel(spec)
        if len(self.k_grid) < 3 or min(self.k_grid) < 0:
            raise DomainError("need at least 3 nonnegative Laplace parameters")
        self.shell = _Shell(spec, self.observe_radius)
        self.outer = _Outer(spec, self.observe_radius)

    @property
    def scene_hash(self) -> str:
        desc = {"spec": self.spec.spec_hash, "R": self.observe_radius, "sigma": self.sigma.label,
                "kernel": self.kernel.label, "k": list(self.k_grid),
                "src": np.round(np.hstack([self.sources_x, self.sources_xi]), 12).tolist()}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def radial_sources(spec: ManifoldSpec, count: int, radius: float, tilt: float = 0.0, seed: int = 0):
    """Sources on the sphere ``|x| = radius`` aimed at the origin, tilted by up to ``tilt`` radians."""
    rng = np.random.default_rng(seed)
    P = fibonacci_sphere(count, spec.dimension) * radius
    D = -P / radius
    if tilt > 0:
        R = rng.normal(size=D.shape)
        R -= np.sum(R * D, 1, keepdims=True) * D
        R /= np.linalg.norm(R, axis=1, keepdims=True)
        a = rng.uniform(0, tilt, len(D))[:, None]
        D = np.cos(a) * D + np.sin(a) * R
    return P, D


# ---------------------------------------------------------------------------
# arrivals

@dataclass
class ArrivalEvent:
    y: np.ndarray                   # observed exit point on the outer sphere
    zeta: np.ndarray                # unit outgoing direction
    t: float
    order: int
    amplitude: np.ndarray           # a(k) on the scene grid
    source: int
    s1: Optional[float] = None      # debug: source-to-scatter length
    scatter: Optional[np.ndarray] = None


def _sigma_segments(sigma, X0, V0, X1, V1, h):
    """Integral of ``sigma`` over steps ``(X0, V0) -> (X1, V1)`` of length ``h`` (cubic Hermite, 3-point Gauss)."""
    out = np.zeros(len(h))
    hh = h[:, None]
    for t, w in zip(_GL_T, _GL_W):
        h00 = 2 * t ** 3 - 3 * t ** 2 + 1
        h10 = t ** 3 - 2 * t ** 2 + t
        h01 = -2 * t ** 3 + 3 * t ** 2
        h11 = t ** 3 - t ** 2
        P = h00 * X0 + h10 * hh * V0 + h01 * X1 + h11 * hh * V1
        out += w * sigma(P)
    return out * h


def attenuation_factor(scene: TransportScene, path: GeodesicPath, k) -> np.ndarray:
    """``h(k) = exp(-k L - int sigma ds)`` along a sampled path of length ``L``."""
    k = np.asarray(k, float)
    if np.any(k < 0):
        raise DomainError("k must be nonnegative")
    s = np.asarray(path.s, float)
    if len(s) < 2:
        return np.ones_like(k)
    h = np.diff(s)
    I = float(np.sum(_sigma_segments(scene.sigma, path.x[:-1], path.xi[:-1], path.x[1:], path.xi[1:], h)))
    return np.exp(-k * (s[-1] - s[0]) - I)


def _shoot_sigma(space, sigma, X, V, s_max, step):
    """Batched shooting that also accumulates ``int sigma ds``."""
    X = np.atleast_2d(X)
    acc = np.zeros(len(X))
    state = {"s": np.zeros(len(X)), "x": X.copy(), "v": np.atleast_2d(V).copy()}

    def rec(s, Xs, Vs, idx):
        h = s[idx] - state["s"][idx]
        acc[idx] += _sigma_segments(sigma, state["x"][idx], state["v"][idx], Xs[idx], Vs[idx], h)
        state["s"][idx] = s[idx]
        state["x"][idx] = Xs[idx]
        state["v"][idx] = Vs[idx]

    res = shoot(space, X, V, s_max, step, recorder=rec)
    return res, acc


def _source_path(scene: TransportScene, j: int, step=None):
    start = UnitTangent(scene.sources_x[j], scene.sources_xi[j])
    path = integrate(scene.outer, start, trap_budget(scene.spec), step)
    if path.status != "exited":
        raise BudgetError("source ray did not reach the observation sphere", path=path)
    return path


def ballistic_arrival(scene: TransportScene, j: int = 0, step=None) -> ArrivalEvent:
    path = _source_path(scene, j, step)
    a = attenuation_factor(scene, path, scene.k_grid)
    return ArrivalEvent(path.exit_point, path.exit_dir, float(path.exit_length), 0, a, j)


def _entry_clip(scene: TransportScene, x0, xi0, step=None):
    """First entry into ``M`` along ``(x0, xi0)`` from the collar: ``(x, xi, length)`` or ``None``."""
    res = shoot(scene.shell, x0, xi0, trap_budget(scene.spec), step)
    x = res.x[0]
    if res.status[0] != EXITED or np.linalg.norm(x) > 0.5 * (scene.spec.radius + scene.observe_radius):
        return None
    return x, res.v[0], float(res.s[0])


@dataclass
class ScatterCounts:
    trapped: int = 0
    tangential: int = 0
    reentered: int = 0
    missed: int = 0


def once_scattered(scene: TransportScene, scatter_spacing: float, directions: int,
                   include_reversal: bool = True, step=None, counts: Optional[ScatterCounts] = None):
    """Once-scattered arrivals for every source.

    Scatter points sit at multiples of ``scatter_spacing`` of in-``M``
    arclength after the source ray enters ``M``; outgoing directions are a
    Fibonacci grid (plus the reversed incoming direction).
    """
    spec = scene.spec
    counts = counts if counts is not None else ScatterCounts()
    step = step or spec.default_step
    k = np.asarray(scene.k_grid, float)
    dirs = fibonacci_sphere(directions, spec.dimension) if directions else np.zeros((0, spec.dimension))
    out = []
    for j in range(len(scene.sources_x)):
        clip = _entry_clip(scene, scene.sources_x[j], scene.sources_xi[j], step)
        if clip is None:
            counts.missed += 1
            continue
        xe, ve, e1 = clip
        # source leg inside the collar
        r0, I0 = _shoot_sigma(scene.shell, scene.sigma, scene.sources_x[j], scene.sources_xi[j], e1, step)
        # scatter points along the in-M part of the source ray
        recs = []

        def rec(s, Xs, Vs, idx):
            kk = int(round(s[0] / h_in))
            if kk % k_sub == 0 and spec.gap(Xs[0:1])[0] > 1e-9 and abs(s[0] - kk * h_in) < 1e-12:
                recs.append((s[0], Xs[0].copy(), Vs[0].copy()))

        k_sub = max(1, int(np.ceil(scatter_spacing / step)))
        h_in = scatter_spacing / k_sub
        shoot(spec, xe, ve, trap_budget(spec), h_in, recorder=rec)
        if not recs:
            continue
        S1 = np.array([r[0] for r in recs])
        P = np.array([r[1] for r in recs])
        VIN = np.array([r[2] for r in recs])
        # sigma along the in-M source leg up to each scatter point
        _, Iin = _shoot_sigma(spec, scene.sigma, np.repeat(xe[None], len(S1), 0),
                              np.repeat(ve[None], len(S1), 0), S1, h_in)
        m = len(dirs) + (1 if include_reversal else 0)
        PP = np.repeat(P, m, 0)
        ETA = np.concatenate([np.broadcast_to(dirs, (len(P), len(dirs), spec.dimension)),
                              (-VIN)[:, None, :]] if include_reversal else
                             [np.broadcast_to(dirs, (len(P), len(dirs), spec.dimension))], axis=1)
        ETA = spec.normalize(PP, ETA.reshape(-1, spec.dimension))
        VV = np.repeat(VIN, m, 0)
        res2, I2 = _shoot_sigma(spec, scene.sigma, PP, ETA, trap_budget(spec), step)
        ok = res2.status == EXITED
        counts.trapped += int(np.sum(~ok))
        cos_out = -spec.inner(res2.x, res2.v, spec.normal_field(res2.x))
        tang = ok & (cos_out < TANGENTIAL_CUTOFF)
        counts.tangential += int(np.sum(tang))
        ok &= ~tang
        idx = np.nonzero(ok)[0]
        res3, I3 = _shoot_sigma(scene.shell, scene.sigma, res2.x[idx], res2.v[idx], trap_budget(spec), step)
        far = (res3.status == EXITED) & (np.linalg.norm(res3.x, axis=1) > 0.5 * (spec.radius + scene.observe_radius))
        counts.reentered += int(np.sum(~far))
        idx, res3x, res3v, res3s, I3 = idx[far], res3.x[far], res3.v[far], res3.s[far], I3[far]
        sc = idx // m
        s1 = e1 + S1[sc]
        t = s1 + res2.s[idx] + res3s
        I = I0[0] + Iin[sc] + I2[idx] + I3
        K = scene.kernel(PP[idx], ETA[idx], VV[idx])
        amp = K[:, None] * np.exp(-k[None, :] * t[:, None] - I[:, None])
        for q in range(len(idx)):
            out.append(ArrivalEvent(res3x[q], res3v[q], float(t[q]), 1, amp[q], j, float(s1[q]), PP[idx[q]]))
    return out


def exponent_fit(k, a) -> float:
    """Travel time from amplitudes: least-squares slope of ``-log a(k)`` against ``k``."""
    k = np.asarray(k, float)
    a = np.asarray(a, float)
    if len(k) < 3 or len(k) != len(a):
        raise DataError("need at least 3 matching (k, a) samples")
    if np.any(~(a > 0)):
        raise DataError("amplitudes must be positive")
    A = np.column_stack([k, np.ones_like(k)])
    coef, *_ = np.linalg.lstsq(A, -np.log(a), rcond=None)
    return float(coef[0])


def _exit_clip(scene: TransportScene, Y, ZETA, step=None):
    """Trace observed arrivals back to their exit from ``M``: ``(y_M, zeta_M, length, ok)``."""
    Y = np.atleast_2d(np.asarray(Y, float))
    res = shoot(scene.shell, Y, -np.atleast_2d(np.asarray(ZETA, float)), trap_budget(scene.spec), step)
    inner = np.linalg.norm(res.x, axis=1) < 0.5 * (scene.spec.radius + scene.observe_radius)
    return res.x, -res.v, res.s, (res.status == EXITED) & inner


def relation_from_arrivals(scene: TransportScene, events, tol: Tolerances, step=None) -> BrokenRelation:
    """Broken relation from once-scattered arrivals (ballistic ones are ignored).

    Times come from :func:`exponent_fit`; exterior legs are traced back and
    subtracted.  Events that fail clipping or fitting are rejected and
    counted in ``params['rejected']``.
    """
    spec = scene.spec
    n = spec.dimension
    scattered = [e for e in events if e.order == 1]
    ignored = len(events) - len(scattered)
    T = np.full(len(scattered), np.nan)
    for q, e in enumerate(scattered):
        try:
            T[q] = exponent_fit(scene.k_grid, e.amplitude)
        except DataError:
            pass
    src = np.array([e.source for e in scattered], int)
    clips = {j: _entry_clip(scene, scene.sources_x[j], scene.sources_xi[j], step) for j in np.unique(src)}
    has_in = np.array([clips[j] is not None for j in src], bool)
    if scattered:
        Y, Z, L2, ok_out = _exit_clip(scene, [e.y for e in scattered], [e.zeta for e in scattered], step)
    else:
        Y, Z, L2, ok_out = np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), np.zeros(0, bool)
    L1 = np.array([clips[j][2] if clips[j] is not None else np.nan for j in src])
    tm = T - L1 - L2
    good = np.isfinite(T) & has_in & ok_out & (tm > 0)
    idx = np.nonzero(good)[0]
    X = np.array([clips[j][0] for j in src[idx]]).reshape(-1, n)
    XI = np.array([clips[j][1] for j in src[idx]]).reshape(-1, n)
    ev = {"x": X, "xi": XI, "y": Y[idx], "zeta": Z[idx], "t": tm[idx]}
    params = {"kind": "transport", "scene": scene.scene_hash, "rejected": int(np.sum(~good)),
              "ignored": ignored}
    return BrokenRelation(spec, tol, provenance="transport", params=params, events=ev)


def match_rate(a: BrokenRelation, b: BrokenRelation, tol: Optional[Tolerances] = None) -> float:
    """Fraction of explicit events of ``a`` with an event of ``b`` within the tolerances."""
    from scipy.spatial import cKDTree
    from .relation import _angle
    tol = tol or b.tol
    if a.n_explicit == 0:
        return 1.0
    if b.n_explicit == 0:
        return 0.0
    tree = cKDTree(np.hstack([b.ev_x, b.ev_y]))
    cand = tree.query_ball_point(np.hstack([a.ev_x, a.ev_y]), np.sqrt(2.0) * tol.space)
    owner = np.repeat(np.arange(a.n_explicit), [len(c) for c in cand])
    other = np.concatenate([np.asarray(c, int) for c in cand]) if len(owner) else np.zeros(0, int)
    ok = ((np.linalg.norm(a.ev_x[owner] - b.ev_x[other], axis=1) <= tol.space)
          & (np.linalg.norm(a.ev_y[owner] - b.ev_y[other], axis=1) <= tol.space)
          & (np.abs(a.ev_t[owner] - b.ev_t[other]) <= tol.time)
          & (_angle(b.ev_gx[other], b.ev_xi[other], a.ev_xi[owner]) <= tol.angle)
          & (_angle(b.ev_gy[other], b.ev_zeta[other], a.ev_zeta[owner]) <= tol.angle))
    hit = np.zeros(a.n_explicit, bool)
    hit[owner[ok]] = True
    return float(hit.mean())


def write_arrivals_csv(scene: TransportScene, events, path) -> Path:
    n = scene.spec.dimension
    path = Path(path)
    head = {"scene_hash": scene.scene_hash, "spec_hash": scene.spec.spec_hash,
            "k_grid": list(scene.k_grid), "observe_radius": scene.observe_radius}
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(head, sort_keys=True) + "\n")
        w = csv.writer(f)
        w.writerow([f"y{i}" for i in range(n)] + [f"zeta{i}" for i in range(n)] + ["t", "order", "source"]
                   + [f"a_k{k:g}" for k in scene.k_grid])
        for e in events:
            w.writerow([repr(float(v)) for v in e.y] + [repr(float(v)) for v in e.zeta]
                       + [repr(e.t), e.order, e.source] + [repr(float(v)) for v in e.amplitude])
    return path


def read_arrivals_csv(scene: TransportScene, path):
    n = scene.spec.dimension
    with open(path) as f:
        head = json.loads(f.readline()[1:])
        if head.get("scene_hash") != scene.scene_hash:
            raise DataError("arrival file belongs to another scene")
        f.readline()
        data = np.loadtxt(f, delimiter=",", ndmin=2)
    out = []
    for row in data:
        out.append(ArrivalEvent(row[:n], row[n:2 * n], float(row[2 * n]), int(row[2 * n + 1]),
                                row[2 * n + 3:], int(row[2 * n + 2])))
    return out
