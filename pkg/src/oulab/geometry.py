"""Embedded manifolds: charts, metrics, projectors, retractions, frames.

Supported manifolds and their canonical embeddings:

- ``euclidean:n``  — R^n, identity chart.
- ``circle``       — S^1 in R^2, chart variable ``theta`` in [0, 2pi).
- ``torus2``       — S^1 x S^1 in R^4, chart ``theta1, theta2``.
- ``sphere2``      — unit S^2 in R^3, two stereographic charts
  (``u, v``; chart 0 projects from the north pole and covers z < 1,
  chart 1 projects from the south pole and covers z > -1). Fields are
  conventionally written in chart 0.

All operations are vectorized over leading batch axes. Chart coordinate
arrays have shape ``(..., dim)``; ambient points ``(..., ambient_dim)``.
The Laplacian convention is geometric: ``laplacian`` here denotes the
*nonnegative* operator, so the diffusion generator contributes
``-laplacian`` (exposed as :meth:`EmbeddedManifold.neg_laplacian_scale`
times the flat-chart trace of second partials).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmbeddedManifold",
    "Euclidean",
    "Circle",
    "Sphere2",
    "Torus2",
    "make_manifold",
    "MANIFOLD_NAMES",
]

TWO_PI = 2.0 * np.pi


def _unit(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


@dataclass(frozen=True)
class EmbeddedManifold:
    """Base class; concrete manifolds fill in the geometry below."""

    name: str = field(init=False, default="")
    dim: int = field(init=False, default=0)
    ambient_dim: int = field(init=False, default=0)
    chart_vars: tuple[str, ...] = field(init=False, default=())
    angle_vars: frozenset[str] = field(init=False, default=frozenset())
    parallelizable: bool = field(init=False, default=True)
    ricci_lower: float = field(init=False, default=0.0)
    n_charts: int = field(init=False, default=1)

    # -- charts ---------------------------------------------------------
    def from_chart(self, c: np.ndarray, chart: int = 0) -> np.ndarray:
        raise NotImplementedError

    def to_chart(self, x: np.ndarray, chart: int = 0) -> np.ndarray:
        raise NotImplementedError

    def chart_jacobian(self, c: np.ndarray, chart: int = 0) -> np.ndarray:
        """d(from_chart), shape (..., ambient_dim, dim)."""
        raise NotImplementedError

    # -- metric in the chart ---------------------------------------------
    def metric(self, c: np.ndarray) -> np.ndarray:
        j = self.chart_jacobian(c)
        return np.einsum("...ai,...aj->...ij", j, j)

    def inverse_metric(self, c: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.metric(c))

    def sqrt_det_metric(self, c: np.ndarray) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.metric(c)))

    def christoffel(self, c: np.ndarray) -> np.ndarray:
        """Gamma^k_{ij}, shape (..., dim, dim, dim); zero for flat charts."""
        c = np.asarray(c, dtype=float)
        return np.zeros(c.shape[:-1] + (self.dim,) * 3)

    def covariant_hessian_from_partials(
        self, c: np.ndarray, first: np.ndarray, second: np.ndarray
    ) -> np.ndarray:
        """Hess_ij = d_i d_j f - Gamma^k_{ij} d_k f (lower indices)."""
        gamma = self.christoffel(c)
        if not gamma.any():
            return second
        return second - np.einsum("...kij,...k->...ij", gamma, first)

    def neg_laplacian_scale(self, c: np.ndarray) -> np.ndarray:
        """Factor s(c) with (-laplacian f)(c) = s(c) * trace(second partials)."""
        c = np.asarray(c, dtype=float)
        return np.ones(c.shape[:-1])

    # -- embedding geometry ----------------------------------------------
    def tangent_projector(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project_tangent(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        p = self.tangent_projector(x)
        return np.einsum("...ab,...b->...a", p, v)

    def retract(self, y: np.ndarray) -> np.ndarray:
        """Nearest-point-style retraction back onto the manifold."""
        raise NotImplementedError

    def frame(self, x: np.ndarray) -> np.ndarray:
        """Orthonormal tangent frame, shape (..., ambient_dim, dim).

        Smooth in x for parallelizable manifolds (global frame field);
        for the sphere it is a measurable pointwise choice only.
        """
        raise NotImplementedError

    def sample_chart_coords(self, count: int, *, chart: int = 0) -> np.ndarray:
        """Deterministic well-spread chart sample, shape (count-ish, dim)."""
        raise NotImplementedError


@dataclass(frozen=True)
class Euclidean(EmbeddedManifold):
    n: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"euclidean dimension must be >= 1, got {self.n}")
        if self.n == 1:
            names = ("x",)
        elif self.n == 2:
            names = ("x", "y")
        elif self.n == 3:
            names = ("x", "y", "z")
        else:
            names = tuple(f"x{i+1}" for i in range(self.n))
        object.__setattr__(self, "name", f"euclidean:{self.n}")
        object.__setattr__(self, "dim", self.n)
        object.__setattr__(self, "ambient_dim", self.n)
        object.__setattr__(self, "chart_vars", names)
        object.__setattr__(self, "angle_vars", frozenset())
        object.__setattr__(self, "parallelizable", True)
        object.__setattr__(self, "ricci_lower", 0.0)

    def from_chart(self, c, chart=0):
        return np.asarray(c, dtype=float)

    def to_chart(self, x, chart=0):
        return np.asarray(x, dtype=float)

    def chart_jacobian(self, c, chart=0):
        c = np.asarray(c, dtype=float)
        return np.broadcast_to(np.eye(self.n), c.shape[:-1] + (self.n, self.n)).copy()

    def tangent_projector(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.n), x.shape[:-1] + (self.n, self.n)).copy()

    def project_tangent(self, x, v):
        return np.asarray(v, dtype=float)

    def retract(self, y):
        return np.asarray(y, dtype=float)

    def frame(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.n), x.shape[:-1] + (self.n, self.n)).copy()

    def sample_chart_coords(self, count, *, chart=0):
        per_axis = max(2, int(round(count ** (1.0 / self.n))))
        axes = [np.linspace(-5.0, 5.0, per_axis) for _ in range(self.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class Circle(EmbeddedManifold):
    def __post_init__(self):
        object.__setattr__(self, "name", "circle")
        object.__setattr__(self, "dim", 1)
        object.__setattr__(self, "ambient_dim", 2)
        object.__setattr__(self, "chart_vars", ("theta",))
        object.__setattr__(self, "angle_vars", frozenset(("theta",)))
        object.__setattr__(self, "parallelizable", True)
        object.__setattr__(self, "ricci_lower", 0.0)

    def from_chart(self, c, chart=0):
        theta = np.asarray(c, dtype=float)[..., 0]
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def to_chart(self, x, chart=0):
        x = np.asarray(x, dtype=float)
        theta = np.arctan2(x[..., 1], x[..., 0]) % TWO_PI
        return theta[..., None]

    def chart_jacobian(self, c, chart=0):
        theta = np.asarray(c, dtype=float)[..., 0]
        return np.stack([-np.sin(theta), np.cos(theta)], axis=-1)[..., None]

    def _tangent(self, x):
        xh = _unit(np.asarray(x, dtype=float))
        return np.stack([-xh[..., 1], xh[..., 0]], axis=-1)

    def tangent_projector(self, x):
        t = self._tangent(x)
        return t[..., :, None] * t[..., None, :]

    def project_tangent(self, x, v):
        t = self._tangent(x)
        coef = np.einsum("...a,...a->...", t, np.asarray(v, dtype=float))
        return coef[..., None] * t

    def retract(self, y):
        return _unit(np.asarray(y, dtype=float))

    def frame(self, x):
        return self._tangent(x)[..., :, None]

    def sample_chart_coords(self, count, *, chart=0):
        return np.linspace(0.0, TWO_PI, count, endpoint=False)[:, None]


@dataclass(frozen=True)
class Torus2(EmbeddedManifold):
    """Flat torus S^1 x S^1 embedded in R^4 as unit-circle pairs."""

    def __post_init__(self):
        object.__setattr__(self, "name", "torus2")
        object.__setattr__(self, "dim", 2)
        object.__setattr__(self, "ambient_dim", 4)
        object.__setattr__(self, "chart_vars", ("theta1", "theta2"))
        object.__setattr__(self, "angle_vars", frozenset(("theta1", "theta2")))
        object.__setattr__(self, "parallelizable", True)
        object.__setattr__(self, "ricci_lower", 0.0)

    def from_chart(self, c, chart=0):
        c = np.asarray(c, dtype=float)
        t1, t2 = c[..., 0], c[..., 1]
        return np.stack([np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2)], axis=-1)

    def to_chart(self, x, chart=0):
        x = np.asarray(x, dtype=float)
        t1 = np.arctan2(x[..., 1], x[..., 0]) % TWO_PI
        t2 = np.arctan2(x[..., 3], x[..., 2]) % TWO_PI
        return np.stack([t1, t2], axis=-1)

    def chart_jacobian(self, c, chart=0):
        c = np.asarray(c, dtype=float)
        t1, t2 = c[..., 0], c[..., 1]
        zero = np.zeros_like(t1)
        col1 = np.stack([-np.sin(t1), np.cos(t1), zero, zero], axis=-1)
        col2 = np.stack([zero, zero, -np.sin(t2), np.cos(t2)], axis=-1)
        return np.stack([col1, col2], axis=-1)

    def _tangents(self, x):
        x = np.asarray(x, dtype=float)
        a = _unit(x[..., 0:2])
        b = _unit(x[..., 2:4])
        zero = np.zeros_like(a[..., 0])
        t1 = np.stack([-a[..., 1], a[..., 0], zero, zero], axis=-1)
        t2 = np.stack([zero, zero, -b[..., 1], b[..., 0]], axis=-1)
        return t1, t2

    def tangent_projector(self, x):
        t1, t2 = self._tangents(x)
        return t1[..., :, None] * t1[..., None, :] + t2[..., :, None] * t2[..., None, :]

    def project_tangent(self, x, v):
        v = np.asarray(v, dtype=float)
        t1, t2 = self._tangents(x)
        c1 = np.einsum("...a,...a->...", t1, v)
        c2 = np.einsum("...a,...a->...", t2, v)
        return c1[..., None] * t1 + c2[..., None] * t2

    def retract(self, y):
        y = np.asarray(y, dtype=float)
        return np.concatenate([_unit(y[..., 0:2]), _unit(y[..., 2:4])], axis=-1)

    def frame(self, x):
        t1, t2 = self._tangents(x)
        return np.stack([t1, t2], axis=-1)

    def sample_chart_coords(self, count, *, chart=0):
        per_axis = max(2, int(round(np.sqrt(count))))
        axis = np.linspace(0.0, TWO_PI, per_axis, endpoint=False)
        m1, m2 = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([m1.ravel(), m2.ravel()], axis=-1)


@dataclass(frozen=True)
class Sphere2(EmbeddedManifold):
    """Unit sphere in R^3 with two stereographic charts."""

    def __post_init__(self):
        object.__setattr__(self, "name", "sphere2")
        object.__setattr__(self, "dim", 2)
        object.__setattr__(self, "ambient_dim", 3)
        object.__setattr__(self, "chart_vars", ("u", "v"))
        object.__setattr__(self, "angle_vars", frozenset())
        object.__setattr__(self, "parallelizable", False)
        object.__setattr__(self, "ricci_lower", 1.0)
        object.__setattr__(self, "n_charts", 2)

    def _check_chart(self, chart: int) -> None:
        if chart not in (0, 1):
            raise ValueError(f"sphere2 has charts 0 and 1, got {chart}")

    def from_chart(self, c, chart=0):
        self._check_chart(chart)
        c = np.asarray(c, dtype=float)
        u, v = c[..., 0], c[..., 1]
        s = u * u + v * v
        d = 1.0 + s
        z = (s - 1.0) / d if chart == 0 else (1.0 - s) / d
        return np.stack([2.0 * u / d, 2.0 * v / d, z], axis=-1)

    def to_chart(self, x, chart=0):
        self._check_chart(chart)
        x = np.asarray(x, dtype=float)
        denom = (1.0 - x[..., 2]) if chart == 0 else (1.0 + x[..., 2])
        return np.stack([x[..., 0] / denom, x[..., 1] / denom], axis=-1)

    def chart_jacobian(self, c, chart=0):
        self._check_chart(chart)
        c = np.asarray(c, dtype=float)
        u, v = c[..., 0], c[..., 1]
        d = 1.0 + u * u + v * v
        d2 = d * d
        zsign = 1.0 if chart == 0 else -1.0
        col_u = np.stack(
            [(2.0 * d - 4.0 * u * u) / d2, -4.0 * u * v / d2, zsign * 4.0 * u / d2],
            axis=-1,
        )
        col_v = np.stack(
            [-4.0 * u * v / d2, (2.0 * d - 4.0 * v * v) / d2, zsign * 4.0 * v / d2],
            axis=-1,
        )
        return np.stack([col_u, col_v], axis=-1)

    def conformal_factor(self, c):
        """metric = conformal_factor * identity."""
        c = np.asarray(c, dtype=float)
        d = 1.0 + c[..., 0] ** 2 + c[..., 1] ** 2
        return 4.0 / (d * d)

    def metric(self, c):
        lam = self.conformal_factor(c)
        return lam[..., None, None] * np.eye(2)

    def inverse_metric(self, c):
        lam = self.conformal_factor(c)
        return np.eye(2) / lam[..., None, None]

    def sqrt_det_metric(self, c):
        return self.conformal_factor(c)

    def christoffel(self, c):
        c = np.asarray(c, dtype=float)
        u, v = c[..., 0], c[..., 1]
        d = 1.0 + u * u + v * v
        pu = -2.0 * u / d
        pv = -2.0 * v / d
        gamma = np.zeros(c.shape[:-1] + (2, 2, 2))
        gamma[..., 0, 0, 0] = pu
        gamma[..., 0, 0, 1] = pv
        gamma[..., 0, 1, 0] = pv
        gamma[..., 0, 1, 1] = -pu
        gamma[..., 1, 0, 0] = -pv
        gamma[..., 1, 0, 1] = pu
        gamma[..., 1, 1, 0] = pu
        gamma[..., 1, 1, 1] = pv
        return gamma

    def neg_laplacian_scale(self, c):
        return 1.0 / self.conformal_factor(c)

    def tangent_projector(self, x):
        xh = _unit(np.asarray(x, dtype=float))
        eye = np.broadcast_to(np.eye(3), xh.shape[:-1] + (3, 3))
        return eye - xh[..., :, None] * xh[..., None, :]

    def project_tangent(self, x, v):
        xh = _unit(np.asarray(x, dtype=float))
        v = np.asarray(v, dtype=float)
        coef = np.einsum("...a,...a->...", xh, v)
        return v - coef[..., None] * xh

    def retract(self, y):
        return _unit(np.asarray(y, dtype=float))

    def frame(self, x):
        xh = _unit(np.asarray(x, dtype=float))
        # Seed with e_z away from the poles, e_x near them, then project.
        near_pole = np.abs(xh[..., 2]) > 0.9
        seed = np.where(
            near_pole[..., None],
            np.broadcast_to([1.0, 0.0, 0.0], xh.shape),
            np.broadcast_to([0.0, 0.0, 1.0], xh.shape),
        )
        t1 = _unit(self.project_tangent(xh, seed))
        t2 = np.cross(xh, t1)
        return np.stack([t1, t2], axis=-1)

    def sample_chart_coords(self, count, *, chart=0):
        # Fibonacci sphere, mapped through the requested chart.
        i = np.arange(count, dtype=float)
        z = 1.0 - 2.0 * (i + 0.5) / count
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        golden = np.pi * (3.0 - np.sqrt(5.0))
        phi = golden * i
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
        return self.to_chart(pts, chart=chart)


MANIFOLD_NAMES = ("euclidean:n", "circle", "sphere2", "torus2")

_EUCLIDEAN_RE = re.compile(r"^euclidean:(\d+)$")


def make_manifold(name: str) -> EmbeddedManifold:
    """Build a manifold from its config name ('circle', 'euclidean:2', ...)."""
    if name == "circle":
        return Circle()
    if name == "sphere2":
        return Sphere2()
    if name == "torus2":
        return Torus2()
    m = _EUCLIDEAN_RE.match(name)
    if m:
        return Euclidean(int(m.group(1)))
    raise ValueError(
        f"unknown manifold {name!r}; expected one of {', '.join(MANIFOLD_NAMES)}"
    )
