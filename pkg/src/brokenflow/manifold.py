"""Metric geometry on a single coordinate chart.

A :class:`ManifoldSpec` bundles a Riemannian metric, a boundary gap function
``rho`` (positive inside, zero on the boundary) and an optional closed
extension.  Two metric backends exist:

* radial conformal catalog metrics ``g = c(r)^-2 * I`` with
  ``c(r) = alpha + beta r^2`` (Euclidean ball, round hemisphere through the
  stereographic chart, conformal ball), with closed-form Christoffel symbols
  and analytic oracles;
* expression metrics parsed from a spec file, differentiated symbolically.

All array methods are vectorised over leading axes.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import math
from typing import Callable, Optional

import numpy as np
import sympy as sp

from .errors import ConfigError, DomainError, GeometryError

BOUNDARY_TOL = 1e-9
FD_STEP = 1e-5

CATALOG = ("euclidean_ball", "hemisphere_s3", "conformal_ball", "constant_speed")


class RadialQuadratic:
    """Conformal metric ``c(r)^-2 * I`` with wave speed ``c = alpha + beta r^2``."""

    def __init__(self, n: int, alpha: float, beta: float):
        if alpha <= 0 or beta < 0:
            raise ConfigError("radial metric needs alpha > 0 and beta >= 0")
        self.n = n
        self.alpha = float(alpha)
        self.beta = float(beta)

    def speed(self, r):
        return self.alpha + self.beta * np.asarray(r, float) ** 2

    def metric(self, X):
        X = np.asarray(X, float)
        c = self.alpha + self.beta * np.sum(X * X, axis=-1)
        return np.eye(self.n) * (c ** -2)[..., None, None]

    def grad_phi(self, X):
        # phi = -log c
        X = np.asarray(X, float)
        c = self.alpha + self.beta * np.sum(X * X, axis=-1)
        return -2.0 * self.beta * X / c[..., None]

    def christoffel(self, X):
        gp = self.grad_phi(X)
        eye = np.eye(self.n)
        # Gamma^k_ij = d_ik phi_j + d_jk phi_i - d_ij phi_k, stored [..., k, i, j]
        a = eye[:, :, None] * gp[..., None, None, :]
        b = eye[:, None, :] * gp[..., None, :, None]
        c = eye[None, :, :] * gp[..., :, None, None]
        return a + b - c

    def accel(self, X, V):
        gp = self.grad_phi(X)
        vg = np.sum(V * gp, axis=-1)[..., None]
        v2 = np.sum(V * V, axis=-1)[..., None]
        return -2.0 * V * vg + v2 * gp

    def antiderivative(self, r):
        """Integral of 1/c from 0 to r."""
        r = np.asarray(r, float)
        if self.beta == 0.0:
            return r / self.alpha
        k = math.sqrt(self.beta / self.alpha)
        return np.arctan(k * r) / math.sqrt(self.alpha * self.beta)

    @property
    def is_flat(self):
        return self.beta == 0.0

    @property
    def is_sphere(self):
        """All ``beta > 0`` members are round spheres in rescaled stereographic coordinates."""
        return self.beta > 0

    @property
    def lam(self):
        return math.sqrt(self.beta / self.alpha)

    @property
    def sphere_radius(self):
        return 1.0 / (2.0 * math.sqrt(self.alpha * self.beta))

    def embed(self, X):
        """Isometric embedding into the sphere of radius :attr:`sphere_radius`."""
        return self.sphere_radius * _stereo(self.lam * np.asarray(X, float))

    def sphere_distance(self, x, y):
        rs = self.sphere_radius
        c = np.sum(self.embed(x) * self.embed(y), axis=-1) / rs ** 2
        return rs * np.arccos(np.clip(c, -1.0, 1.0))


class ExpressionMetric:
    """Metric given entry-wise by arithmetic expressions in ``x1..xn``."""

    def __init__(self, n: int, entries: dict, chart_symbols=None):
        self.n = n
        self.symbols = sp.symbols(f"x1:{n + 1}")
        self.exprs = [[sp.Integer(0)] * n for _ in range(n)]
        for (i, j), text in entries.items():
            e = _parse(text, self.symbols)
            self.exprs[i][j] = e
            self.exprs[j][i] = e
        self._g = [[_lambdify(self.symbols, self.exprs[i][j]) for j in range(n)] for i in range(n)]
        self._dg = [[[_lambdify(self.symbols, sp.diff(self.exprs[i][j], self.symbols[l]))
                      for j in range(n)] for i in range(n)] for l in range(n)]

    def metric(self, X):
        X = np.asarray(X, float)
        out = np.empty(X.shape[:-1] + (self.n, self.n))
        for i in range(self.n):
            for j in range(self.n):
                out[..., i, j] = self._g[i][j](X)
        return out

    def dmetric(self, X):
        """Array ``[..., l, i, j] = d_l g_ij``."""
        X = np.asarray(X, float)
        out = np.empty(X.shape[:-1] + (self.n, self.n, self.n))
        for l in range(self.n):
            for i in range(self.n):
                for j in range(self.n):
                    out[..., l, i, j] = self._dg[l][i][j](X)
        return out

    def christoffel(self, X):
        g = self.metric(X)
        dg = self.dmetric(X)
        ginv = np.linalg.inv(g)
        # term[l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
        t1 = np.einsum("...ijl->...lij", dg)
        t2 = np.einsum("...jil->...lij", dg)
        term = t1 + t2 - dg
        return 0.5 * np.einsum("...kl,...lij->...kij", ginv, term)

    def accel(self, X, V):
        gam = self.christoffel(X)
        return -np.einsum("...kij,...i,...j->...k", gam, V, V)


def _parse(text, symbols):
    names = {str(s): s for s in symbols}
    names.update({"pi": sp.pi, "sqrt": sp.sqrt, "exp": sp.exp, "log": sp.log,
                  "sin": sp.sin, "cos": sp.cos, "tan": sp.tan, "atan": sp.atan})
    try:
        return sp.sympify(text, locals=names)
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc}") from exc


def _lambdify(symbols, expr):
    f = sp.lambdify(symbols, expr, "numpy")

    def call(X):
        val = f(*np.moveaxis(X, -1, 0))
        return np.broadcast_to(np.asarray(val, float), X.shape[:-1])

    return call


class ManifoldSpec:
    """Immutable description of ``(M, g)`` over one chart.

    Use :func:`catalog` or :func:`from_text` to build instances.
    """

    def __init__(self, dimension, chart_lo, chart_hi, backend, gap, gap_grad, *,
                 description, extension_factory=None, oracles=None, radial=None,
                 has_boundary=True, radius=None):
        self.dimension = int(dimension)
        self.chart_lo = np.asarray(chart_lo, float)
        self.chart_hi = np.asarray(chart_hi, float)
        self.backend = backend
        self._gap = gap
        self._gap_grad = gap_grad
        self.description = description
        self._extension_factory = extension_factory
        self._extension = None
        self.oracles = dict(oracles or {})
        self.radial = radial
        self.has_boundary = has_boundary
        self.radius = radius

    # -- identity -----------------------------------------------------
    @property
    def name(self):
        return self.description["manifold"].get("catalog", "expression")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, items in self.description.items():
            cp[section] = {k: str(v) for k, v in items.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @property
    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def __repr__(self):
        return f"ManifoldSpec({self.name}, n={self.dimension}, hash={self.spec_hash})"

    @property
    def chart_diameter(self) -> float:
        return float(np.max(self.chart_hi - self.chart_lo))

    @property
    def default_step(self) -> float:
        return 1e-3 * self.chart_diameter

    # -- geometry -----------------------------------------------------
    def in_chart(self, X):
        X = np.asarray(X, float)
        return np.all((X >= self.chart_lo) & (X <= self.chart_hi), axis=-1)

    def metric(self, X):
        return self.backend.metric(X)

    def christoffel(self, X):
        return self.backend.christoffel(X)

    def accel(self, X, V):
        return self.backend.accel(X, V)

    def gap(self, X):
        return self._gap(np.asarray(X, float))

    def gap_grad(self, X):
        return self._gap_grad(np.asarray(X, float))

    def inner(self, X, U, V):
        g = self.metric(X)
        return np.einsum("...i,...ij,...j->...", U, g, V)

    def norm(self, X, V):
        return np.sqrt(self.inner(X, V, V))

    def normalize(self, X, V):
        V = np.asarray(V, float)
        return V / self.norm(X, V)[..., None]

    def angle(self, X, U, V):
        """g-angle between two vectors at the same base point."""
        c = self.inner(X, U, V) / (self.norm(X, U) * self.norm(X, V))
        return np.arccos(np.clip(c, -1.0, 1.0))

    def normal_field(self, X):
        """Unit g-gradient of ``rho``; equals the inward normal on the boundary."""
        X = np.asarray(X, float)
        grad = self.gap_grad(X)
        ginv = np.linalg.inv(self.metric(X))
        v = np.einsum("...ij,...j->...i", ginv, grad)
        nrm = np.sqrt(np.einsum("...i,...i->...", v, grad))
        return v / nrm[..., None]

    def extension(self) -> Optional["ManifoldSpec"]:
        if self._extension is None and self._extension_factory is not None:
            self._extension = self._extension_factory()
        return self._extension

    # -- validation ---------------------------------------------------
    def check_point(self, x):
        x = np.asarray(x, float)
        if x.shape[-1] != self.dimension:
            raise DomainError(f"expected {self.dimension} coordinates, got {x.shape[-1]}")
        if not np.all(self.in_chart(x)):
            raise DomainError(f"point {x} outside chart")
        return x


# ---------------------------------------------------------------------------
# public operations

def metric_at(spec: ManifoldSpec, x) -> np.ndarray:
    x = spec.check_point(x)
    g = spec.metric(x)
    if np.linalg.eigvalsh(g).min() <= 0:
        raise GeometryError(f"metric not positive definite at {x}")
    return g


def christoffel_at(spec: ManifoldSpec, x) -> np.ndarray:
    """Christoffel symbols ``Gamma[k, i, j]`` at ``x``."""
    metric_at(spec, x)
    return spec.christoffel(np.asarray(x, float))


def christoffel_fd(spec: ManifoldSpec, x, h=FD_STEP) -> np.ndarray:
    """Christoffel symbols from central differences of the metric alone."""
    x = np.asarray(x, float)
    n = spec.dimension
    dg = np.empty((n, n, n))
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dg[l] = (spec.metric(x + e) - spec.metric(x - e)) / (2 * h)
    ginv = np.linalg.inv(spec.metric(x))
    term = np.einsum("ijl->lij", dg) + np.einsum("jil->lij", dg) - dg
    return 0.5 * np.einsum("kl,lij->kij", ginv, term)


def curvature_at(spec: ManifoldSpec, x, h=1e-4) -> np.ndarray:
    """Riemann tensor ``R[l, i, j, k]`` with ``R(d_j, d_k) d_i = R^l_ijk d_l``."""
    x = spec.check_point(x)
    n = spec.dimension
    gam = spec.christoffel(x)
    dgam = np.empty((n, n, n, n))           # [m, k, i, j] = d_m Gamma^k_ij
    for m in range(n):
        e = np.zeros(n)
        e[m] = h
        dgam[m] = (spec.christoffel(x + e) - spec.christoffel(x - e)) / (2 * h)
    # d_j Gamma^l_ki - d_k Gamma^l_ji
    R = np.einsum("jlki->lijk", dgam) - np.einsum("klji->lijk", dgam)
    R += np.einsum("ljm,mki->lijk", gam, gam) - np.einsum("lkm,mji->lijk", gam, gam)
    return R


def sectional_curvature(spec: ManifoldSpec, x, X, Y) -> float:
    R = curvature_at(spec, x)
    g = spec.metric(np.asarray(x, float))
    RXYY = np.einsum("lijk,i,j,k->l", R, Y, X, Y)
    num = RXYY @ g @ X
    den = (X @ g @ X) * (Y @ g @ Y) - (X @ g @ Y) ** 2
    return float(num / den)


def boundary_gap(spec: ManifoldSpec, x):
    x = np.asarray(x, float)
    return spec.gap(x)


def inward_normal(spec: ManifoldSpec, z, tol=1e-7) -> np.ndarray:
    z = spec.check_point(z)
    if abs(float(spec.gap(z))) > tol:
        raise DomainError(f"point {z} is not on the boundary (rho={float(spec.gap(z)):.3g})")
    grad = spec.gap_grad(z)
    if np.linalg.norm(grad) == 0:
        raise GeometryError("vanishing boundary gradient")
    return spec.normal_field(z)


# ---------------------------------------------------------------------------
# catalog

def _stereo(X):
    """Inverse stereographic map of the chart into the unit sphere S^n."""
    X = np.asarray(X, float)
    r2 = np.sum(X * X, axis=-1)[..., None]
    return np.concatenate([2 * X, 1 - r2], axis=-1) / (1 + r2)


def _radial_gap(radius):
    def gap(X):
        return radius - np.linalg.norm(X, axis=-1)

    def grad(X):
        r = np.linalg.norm(X, axis=-1)[..., None]
        with np.errstate(invalid="ignore", divide="ignore"):
            out = -X / r
        return np.where(r > 0, out, 0.0)

    return gap, grad


def _no_gap(X):
    return np.full(np.asarray(X).shape[:-1], np.inf)


def _no_grad(X):
    return np.zeros_like(np.asarray(X, float))


def catalog(name: str, dimension: int = 3, **params) -> ManifoldSpec:
    """Build a catalog manifold.

    ``euclidean_ball``
        flat unit ball; extension ``ball`` (flat space) or ``torus``.
    ``hemisphere_s3``
        upper hemisphere of the unit sphere in the stereographic chart; the
        boundary ``|x| = 1`` is the equator, ``x = 0`` the pole.
    ``conformal_ball``
        ``c(r) = 1 + a r^2`` (param ``a``, default 0.3).
    ``constant_speed``
        ``c = const`` (param ``c``, default 2).
    """
    if name not in CATALOG:
        raise ConfigError(f"unknown catalog manifold {name!r}; known: {CATALOG}")
    n = int(dimension)
    if n < 2:
        raise ConfigError("dimension must be >= 2")
    radius = float(params.pop("radius", 1.0))
    ext_kind = params.pop("extension", None)
    period = float(params.pop("period", 4.0))
    if name == "euclidean_ball":
        alpha, beta = 1.0, 0.0
        ext_kind = ext_kind or "ball"
    elif name == "hemisphere_s3":
        alpha, beta = 0.5, 0.5
        ext_kind = ext_kind or "sphere"
        if radius != 1.0:
            raise ConfigError("hemisphere_s3 has a fixed equator at |x| = 1")
    elif name == "conformal_ball":
        alpha, beta = 1.0, float(params.pop("a", 0.3))
        ext_kind = ext_kind or "ball"
    else:
        alpha, beta = float(params.pop("c", 2.0)), 0.0
        ext_kind = ext_kind or "ball"
    if params:
        raise ConfigError(f"unknown parameters for {name}: {sorted(params)}")
    if ext_kind not in ("ball", "sphere", "torus", "none"):
        raise ConfigError(f"unknown extension {ext_kind!r}")
    if ext_kind == "sphere" and name != "hemisphere_s3":
        raise ConfigError("sphere extension only exists for hemisphere_s3")
    if ext_kind == "torus" and beta != 0.0:
        raise ConfigError("torus extension needs a flat metric")

    backend = RadialQuadratic(n, alpha, beta)
    gap, grad = _radial_gap(radius)
    half = 1.25 * radius
    desc = {"manifold": {"dimension": n, "catalog": name, "extension": ext_kind},
            "params": {"radius": radius}}
    if name == "conformal_ball":
        desc["params"]["a"] = beta
    if name == "constant_speed":
        desc["params"]["c"] = alpha
    if ext_kind == "torus":
        desc["params"]["period"] = period

    oracles = _radial_oracles(backend, radius)
    factory = None
    if ext_kind != "none":
        def factory():
            return _extension(backend, n, radius, ext_kind, period, desc)
    return ManifoldSpec(n, [-half] * n, [half] * n, backend, gap, grad, description=desc,
                        extension_factory=factory, oracles=oracles, radial=backend,
                        radius=radius)


def _radial_oracles(backend: RadialQuadratic, radius: float) -> dict:
    depth = float(backend.antiderivative(radius))
    orc = {
        "tau_b": lambda z: depth,
        "tau_f": lambda z: depth,
        "mu1": lambda z: 2 * depth,
        "dist_to_boundary": lambda x: float(backend.antiderivative(radius)
                                            - backend.antiderivative(np.linalg.norm(x))),
    }
    if backend.is_flat:
        orc["distance"] = lambda x, y: float(np.linalg.norm(np.subtract(x, y))) / backend.alpha
        orc["tau_c"] = lambda x, xi: math.inf
    else:
        orc["distance"] = lambda x, y: float(backend.sphere_distance(x, y))
        orc["tau_c"] = lambda x, xi: math.pi * backend.sphere_radius
    return orc


def _extension(backend, n, radius, kind, period, desc):
    ext_desc = {"manifold": dict(desc["manifold"], extension="none", role=f"extension:{kind}"),
                "params": dict(desc["params"])}
    orc = {}
    if kind == "sphere" or (kind == "ball" and not backend.is_flat):
        # the full sphere; the chart misses a neighbourhood of the antipode of 0
        half = max(3.0 * radius, 1.5 / backend.lam ** 2)
        orc["distance"] = lambda x, y: float(backend.sphere_distance(x, y))
        orc["tau_c"] = lambda x, xi: math.pi * backend.sphere_radius
        orc["tau_R"] = lambda x, xi: math.pi * backend.sphere_radius
    elif kind == "torus":
        half = 2.0 * period

        def dist(x, y):
            d = np.subtract(y, x)
            d = d - period * np.round(d / period)
            return float(np.linalg.norm(d)) / backend.alpha
        orc["distance"] = dist
        orc["tau_c"] = lambda x, xi: math.inf
        orc["period"] = period
    else:
        half = 3.0 * radius
        orc["distance"] = lambda x, y: float(np.linalg.norm(np.subtract(x, y))) / backend.alpha
        orc["tau_c"] = lambda x, xi: math.inf
        orc["tau_R"] = lambda x, xi: math.inf
    return ManifoldSpec(n, [-half] * n, [half] * n, backend, _no_gap, _no_grad,
                        description=ext_desc, oracles=orc, radial=backend,
                        has_boundary=False, radius=None)


# ---------------------------------------------------------------------------
# spec files

def from_text(text: str) -> ManifoldSpec:
    """Parse the declarative manifold format (see README)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if "manifold" not in cp:
        raise ConfigError("missing [manifold] section")
    sec = dict(cp["manifold"])
    n = int(sec.pop("dimension", 3))
    if "catalog" in sec:
        name = sec.pop("catalog")
        ext = sec.pop("extension", None)
        sec.pop("role", None)
        if sec:
            raise ConfigError(f"unknown keys in [manifold]: {sorted(sec)}")
        params = {k: float(v) for k, v in cp["params"].items()} if "params" in cp else {}
        if ext is not None:
            params["extension"] = ext
        return catalog(name, n, **params)
    return _expression_spec(n, sec, cp)


def _expression_spec(n, sec, cp):
    allowed = {"chart_lo", "chart_hi", "rho", "extension"}
    entries = {}
    for key in list(sec):
        if key.startswith("g") and len(key) == 3 and key[1:].isdigit():
            i, j = int(key[1]) - 1, int(key[2]) - 1
            if not (0 <= i < n and 0 <= j < n):
                raise ConfigError(f"metric entry {key} out of range")
            entries[(min(i, j), max(i, j))] = sec.pop(key)
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [manifold]: {sorted(unknown)}")
    if "rho" not in sec:
        raise ConfigError("expression manifold needs a rho expression")
    lo = float(sec.get("chart_lo", -1.5))
    hi = float(sec.get("chart_hi", 1.5))
    backend = ExpressionMetric(n, entries)
    rho_expr = _parse(sec["rho"], backend.symbols)
    rho_f = _lambdify(backend.symbols, rho_expr)
    grad_f = [_lambdify(backend.symbols, sp.diff(rho_expr, s)) for s in backend.symbols]

    def grad(X):
        return np.stack([f(X) for f in grad_f], axis=-1)

    desc = {"manifold": {"dimension": n, "chart_lo": lo, "chart_hi": hi, "rho": sec["rho"],
                         "extension": sec.get("extension", "none")}}
    for (i, j), text in sorted(entries.items()):
        desc["manifold"][f"g{i + 1}{j + 1}"] = text
    return ManifoldSpec(n, [lo] * n, [hi] * n, backend, rho_f, grad, description=desc)


def load(path) -> ManifoldSpec:
    with open(path) as fh:
        return from_text(fh.read())


def save(spec: ManifoldSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(spec.to_text())
