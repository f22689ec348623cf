"""Two-point geodesic legs between interior points and boundary samples.

A leg solver returns, for interior points ``X`` and boundary points ``Z``, the
length of the connecting geodesic and its unit direction at ``Z`` pointing
into ``M`` (towards ``X``).  Closed forms exist for flat metrics (straight
lines) and for the spherical catalog metrics (great circles through the
stereographic embedding); other metrics fall back to two-point shooting.
"""
from __future__ import annotations

import numpy as np

from ..errors import GeometryError
from ..manifold import ManifoldSpec, _stereo
from .flow import connect


class FlatLegs:
    exact = True

    def __init__(self, spec: ManifoldSpec):
        self.alpha = spec.radial.alpha

    def pairs(self, X, Z):
        """Elementwise legs ``X[k] -> Z[k]``."""
        d = np.asarray(X, float) - np.asarray(Z, float)
        r = np.linalg.norm(d, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            D = self.alpha * d / r[..., None]
        return r / self.alpha, D

    def __call__(self, X, Z):
        return self.pairs(np.asarray(X, float)[:, None, :], np.asarray(Z, float)[None, :, :])


class SphereLegs:
    """Great-circle legs for ``c = alpha + beta r^2`` with ``beta > 0``."""

    exact = True

    def __init__(self, spec: ManifoldSpec):
        b = spec.radial
        self.lam = b.lam
        self.rs = b.sphere_radius

    def pairs(self, X, Z):
        """Elementwise legs ``X[..., :] -> Z[..., :]`` (broadcasting)."""
        X = np.asarray(X, float)
        Z = np.asarray(Z, float)
        P = _stereo(self.lam * X)
        y = self.lam * Z
        Q = _stereo(y)
        X, Z = np.broadcast_arrays(X, Z)
        P, Q = np.broadcast_arrays(P, Q)
        y = np.broadcast_to(y, Z.shape)
        c = np.clip(np.sum(P * Q, axis=-1), -1.0, 1.0)
        theta = np.arccos(c)
        with np.errstate(invalid="ignore", divide="ignore"):
            T = (P - c[..., None] * Q) / np.sin(theta)[..., None]
        n = Z.shape[-1]
        q = 1.0 + np.sum(y * y, axis=-1)
        Tt, Tl = T[..., :n], T[..., n]
        yT = np.sum(y * Tt, axis=-1)
        JT = (2 * q[..., None] * Tt - 4 * y * (yT + Tl)[..., None]) / (q ** 2)[..., None]
        kappa = self.rs * self.lam * 2.0 / q                   # conformal factor at Z
        D = JT * (self.rs * self.lam / kappa ** 2)[..., None]
        return self.rs * theta, D

    def __call__(self, X, Z):
        return self.pairs(np.asarray(X, float)[:, None, :], np.asarray(Z, float)[None, :, :])


class ShootingLegs:
    """Generic legs by damped-Newton two-point shooting (slow; small problems only)."""

    exact = False

    def __init__(self, spec: ManifoldSpec):
        self.spec = spec

    def __call__(self, X, Z):
        X = np.asarray(X, float)
        Z = np.asarray(Z, float)
        N, m, n = len(X), len(Z), Z.shape[1]
        L = np.full((N, m), np.nan)
        D = np.full((N, m, n), np.nan)
        for j, z in enumerate(Z):
            for i, x in enumerate(X):
                try:
                    xi, ell, _ = connect(self.spec, z, x)
                except GeometryError:
                    continue
                L[i, j] = ell
                D[i, j] = xi
        return L, D

    def pairs(self, X, Z):
        X = np.asarray(X, float)
        Z = np.asarray(Z, float)
        L = np.full(len(X), np.nan)
        D = np.full(X.shape, np.nan)
        for k, (x, z) in enumerate(zip(X, Z)):
            try:
                xi, ell, _ = connect(self.spec, z, x)
            except GeometryError:
                continue
            L[k] = ell
            D[k] = xi
        return L, D


def leg_solver(spec: ManifoldSpec):
    if spec.radial is not None:
        return FlatLegs(spec) if spec.radial.is_flat else SphereLegs(spec)
    return ShootingLegs(spec)
