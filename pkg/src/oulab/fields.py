"""Problem data on a manifold: fields, potentials, connections, constants.

A :class:`Problem` bundles everything describing the operator

    H u = laplacian(u) + grad(phi) . grad(u) - X(u) + V u

(with the *nonnegative* Laplacian convention) acting on sections of a
bundle over the manifold, together with the structural constants

    (V2)  h <= V <= zeta * h
    (A2)  |Hess phi| <= eps |d phi|^2 + C_eps          (tabulated pairs)
    (A3)  div X - X(phi) + theta * h >= -beta1
    (A4)  |X| <= kappa * (|d phi|^2 + h + beta2)^(1/2)
    (A5)  |d h| <= gamma * h^(3/2) + beta3
    (A6)  theta/p + (p-1) gamma (kappa/p + gamma/4) < 1

and the thresholds (eps0, lambda0, rho0, lambda1, ...) derived from them.
Fields are given as expression strings in chart coordinates (periodic on
angle charts); derivatives are symbolic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import expressions as ex
from .geometry import EmbeddedManifold, make_manifold

__all__ = [
    "ScalarField",
    "VectorField",
    "Potential",
    "Connection",
    "Section",
    "AssumptionConstants",
    "Thresholds",
    "ThresholdError",
    "ConfigError",
    "ConditionCheck",
    "AssumptionReport",
    "Problem",
    "a6_margin",
    "compute_thresholds",
    "check_assumptions",
    "u_epsilon",
    "drift",
    "make_ambient_drift",
    "load_problem",
    "parse_section",
    "EPS_GRID",
]


class ConfigError(ValueError):
    """Config-file problem; carries config path and field name."""

    def __init__(self, message: str, *, field_name: str, config_path: str = "<dict>"):
        super().__init__(f"{config_path}: field '{field_name}': {message}")
        self.field_name = field_name
        self.config_path = config_path


class ThresholdError(ValueError):
    """The structural constants admit no feasible threshold."""


def _chart_env(manifold: EmbeddedManifold, c: np.ndarray) -> dict:
    c = np.asarray(c, dtype=float)
    return {name: c[..., i] for i, name in enumerate(manifold.chart_vars)}


def _broadcast_values(res, shape) -> np.ndarray:
    arr = np.asarray(res, dtype=float)
    if arr.shape != shape:
        arr = np.broadcast_to(arr, shape).copy()
    return arr


# ---------------------------------------------------------------------------
# Scalar and vector fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarField:
    """Real scalar field given by an expression in chart coordinates."""

    manifold: EmbeddedManifold
    source: str
    ast: ex.Expr

    @classmethod
    def parse(cls, manifold: EmbeddedManifold, source: str, context: str = "field") -> "ScalarField":
        ast = ex.parse(source, variables=manifold.chart_vars)
        ex.ensure_periodic(ast, manifold.angle_vars, context=context)
        return cls(manifold, source, ast)

    @classmethod
    def zero(cls, manifold: EmbeddedManifold) -> "ScalarField":
        return cls(manifold, "0", ex.Num(0.0))

    @property
    def is_zero(self) -> bool:
        return ex.is_zero(self.ast)

    @cached_property
    def _grad_asts(self) -> tuple:
        return tuple(ex.differentiate(self.ast, v) for v in self.manifold.chart_vars)

    @cached_property
    def _second_asts(self) -> tuple:
        return tuple(
            tuple(ex.differentiate(g, v) for v in self.manifold.chart_vars)
            for g in self._grad_asts
        )

    @property
    def has_zero_gradient(self) -> bool:
        return all(ex.is_zero(g) for g in self._grad_asts)

    def value(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        env = _chart_env(self.manifold, c)
        return _broadcast_values(ex.evaluate(self.ast, env), c.shape[:-1])

    def grad(self, c: np.ndarray) -> np.ndarray:
        """Partial derivatives (d_i f), shape (..., dim)."""
        c = np.asarray(c, dtype=float)
        env = _chart_env(self.manifold, c)
        cols = [_broadcast_values(ex.evaluate(g, env), c.shape[:-1]) for g in self._grad_asts]
        return np.stack(cols, axis=-1)

    def second_partials(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        env = _chart_env(self.manifold, c)
        shape = c.shape[:-1]
        rows = [
            [_broadcast_values(ex.evaluate(a, env), shape) for a in row]
            for row in self._second_asts
        ]
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    def covariant_hessian(self, c: np.ndarray) -> np.ndarray:
        return self.manifold.covariant_hessian_from_partials(
            c, self.grad(c), self.second_partials(c)
        )

    def grad_norm_sq(self, c: np.ndarray) -> np.ndarray:
        """|d f|^2 = g^{ij} d_i f d_j f."""
        g = self.grad(c)
        ginv = self.manifold.inverse_metric(c)
        return np.einsum("...ij,...i,...j->...", ginv, g, g)

    def hess_norm(self, c: np.ndarray) -> np.ndarray:
        """Frobenius norm of the covariant Hessian w.r.t. the metric."""
        h = self.covariant_hessian(c)
        ginv = self.manifold.inverse_metric(c)
        sq = np.einsum("...ik,...jl,...ij,...kl->...", ginv, ginv, h, h)
        return np.sqrt(np.maximum(sq, 0.0))

    def laplacian(self, c: np.ndarray) -> np.ndarray:
        """Nonnegative Laplacian: on flat charts -trace(second partials)."""
        trace = np.einsum("...ii->...", self.second_partials(c))
        return -self.manifold.neg_laplacian_scale(c) * trace


@dataclass(frozen=True)
class VectorField:
    """Vector field with chart components X^i (expression strings)."""

    manifold: EmbeddedManifold
    sources: tuple[str, ...]
    components: tuple[ex.Expr, ...]

    @classmethod
    def parse(cls, manifold: EmbeddedManifold, sources, context: str = "X") -> "VectorField":
        sources = tuple(sources)
        if len(sources) != manifold.dim:
            raise ValueError(
                f"{context}: expected {manifold.dim} components for {manifold.name}, "
                f"got {len(sources)}"
            )
        comps = []
        for i, src in enumerate(sources):
            ast = ex.parse(src, variables=manifold.chart_vars)
            ex.ensure_periodic(ast, manifold.angle_vars, context=f"{context}[{i}]")
            comps.append(ast)
        return cls(manifold, sources, tuple(comps))

    @classmethod
    def zero(cls, manifold: EmbeddedManifold) -> "VectorField":
        return cls(manifold, ("0",) * manifold.dim, (ex.Num(0.0),) * manifold.dim)

    @property
    def is_zero(self) -> bool:
        return all(ex.is_zero(a) for a in self.components)

    @cached_property
    def _div_asts(self) -> tuple:
        return tuple(
            ex.differentiate(a, v) for a, v in zip(self.components, self.manifold.chart_vars)
        )

    def values(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        env = _chart_env(self.manifold, c)
        cols = [_broadcast_values(ex.evaluate(a, env), c.shape[:-1]) for a in self.components]
        return np.stack(cols, axis=-1)

    def divergence(self, c: np.ndarray) -> np.ndarray:
        """Riemannian divergence: d_i X^i + X^i d_i log sqrt(det g)."""
        c = np.asarray(c, dtype=float)
        env = _chart_env(self.manifold, c)
        out = np.zeros(c.shape[:-1])
        for a in self._div_asts:
            out = out + _broadcast_values(ex.evaluate(a, env), c.shape[:-1])
        dlog = _dlog_sqrt_det(self.manifold, c)
        if dlog is not None:
            out = out + np.einsum("...i,...i->...", self.values(c), dlog)
        return out

    def derivation(self, f: ScalarField, c: np.ndarray) -> np.ndarray:
        """X(f) = X^i d_i f."""
        return np.einsum("...i,...i->...", self.values(c), f.grad(c))

    def norm(self, c: np.ndarray) -> np.ndarray:
        """|X|_g = sqrt(g_ij X^i X^j)."""
        vals = self.values(c)
        g = self.manifold.metric(c)
        sq = np.einsum("...ij,...i,...j->...", g, vals, vals)
        return np.sqrt(np.maximum(sq, 0.0))


def _dlog_sqrt_det(manifold: EmbeddedManifold, c: np.ndarray):
    """d_i log sqrt(det g); None when identically zero (flat charts)."""
    if manifold.name != "sphere2":
        return None
    c = np.asarray(c, dtype=float)
    d = 1.0 + c[..., 0] ** 2 + c[..., 1] ** 2
    return np.stack([-4.0 * c[..., 0] / d, -4.0 * c[..., 1] / d], axis=-1)


# ---------------------------------------------------------------------------
# Potentials, connections, sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Potential:
    """Zeroth-order term V: scalar field or real symmetric matrix field."""

    m: int
    scalar: ScalarField | None = None
    matrix: tuple[tuple[ScalarField, ...], ...] | None = None
    nonneg: bool = False

    @property
    def is_scalar(self) -> bool:
        return self.scalar is not None

    @property
    def is_zero(self) -> bool:
        if self.is_scalar:
            return self.scalar.is_zero
        return all(f.is_zero for row in self.matrix for f in row)

    def scalar_values(self, c: np.ndarray) -> np.ndarray:
        if not self.is_scalar:
            raise ValueError("matrix potential is not scalar-valued")
        return self.scalar.value(c)

    def matrix_values(self, c: np.ndarray) -> np.ndarray:
        """Shape (..., m, m)."""
        c = np.asarray(c, dtype=float)
        if self.is_scalar:
            vals = self.scalar.value(c)
            return vals[..., None, None] * np.eye(self.m)
        rows = [np.stack([f.value(c) for f in row], axis=-1) for row in self.matrix]
        return np.stack(rows, axis=-2)


@dataclass(frozen=True)
class Connection:
    """Bundle choice plus (for trivial bundles) a connection 1-form.

    ``omega[i][a][b]`` is the (a, b) entry of the matrix paired with chart
    direction i, stored as a (real part, imaginary part) field pair. The
    matrices must be anti-Hermitian so parallel transport is unitary.
    """

    bundle: str  # 'trivial' | 'tangent'
    m: int
    omega: tuple | None = None  # [dim][m][m] of (ScalarField, ScalarField)

    @property
    def is_flat(self) -> bool:
        if self.omega is None:
            return True
        return all(re.is_zero and im.is_zero for mat in self.omega for row in mat for (re, im) in row)

    @property
    def is_scalar_trivial(self) -> bool:
        return self.bundle == "trivial" and self.m == 1 and self.is_flat

    def omega_values(self, c: np.ndarray) -> np.ndarray:
        """Shape (..., dim, m, m) complex; zeros when no form is set."""
        c = np.asarray(c, dtype=float)
        dim = c.shape[-1]
        shape = c.shape[:-1] + (dim, self.m, self.m)
        out = np.zeros(shape, dtype=complex)
        if self.omega is None:
            return out
        for i, mat in enumerate(self.omega):
            for a, row in enumerate(mat):
                for b, (re_f, im_f) in enumerate(row):
                    out[..., i, a, b] = re_f.value(c) + 1j * im_f.value(c)
        return out


@dataclass(frozen=True)
class Section:
    """Bundle section (the integrand f): m complex component fields."""

    manifold: EmbeddedManifold
    components: tuple  # m pairs (re ScalarField, im ScalarField | None)

    @property
    def m(self) -> int:
        return len(self.components)

    def values(self, c: np.ndarray) -> np.ndarray:
        """Shape (..., m), complex."""
        c = np.asarray(c, dtype=float)
        cols = []
        for re_f, im_f in self.components:
            col = re_f.value(c).astype(complex)
            if im_f is not None:
                col = col + 1j * im_f.value(c)
            cols.append(col)
        return np.stack(cols, axis=-1)

    def sup_bound(self, n_samples: int = 4096) -> float:
        """Sampled sup of the fiber norm |f|."""
        coords = self.manifold.sample_chart_coords(n_samples)
        vals = self.values(coords)
        return float(np.max(np.linalg.norm(vals, axis=-1)))


def parse_section(manifold: EmbeddedManifold, spec, m: int = 1) -> Section:
    """Parse a section spec: expression string, {re, im} dict, or list of those."""
    if isinstance(spec, (str, dict)):
        spec = [spec]
    comps = []
    for i, comp in enumerate(spec):
        if isinstance(comp, str):
            comps.append((ScalarField.parse(manifold, comp, f"section[{i}]"), None))
        elif isinstance(comp, dict):
            re_src = comp.get("re", "0")
            im_src = comp.get("im", "0")
            re_f = ScalarField.parse(manifold, re_src, f"section[{i}].re")
            im_f = ScalarField.parse(manifold, im_src, f"section[{i}].im")
            comps.append((re_f, None if im_f.is_zero else im_f))
        else:
            raise ValueError(f"section component {i}: expected string or {{re, im}} dict")
    if len(comps) != m:
        raise ValueError(f"section has {len(comps)} components, bundle has fiber dimension {m}")
    return Section(manifold, tuple(comps))


# ---------------------------------------------------------------------------
# Structural constants and thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionConstants:
    p: float = 2.0
    theta: float = 0.0
    beta1: float = 0.0
    kappa: float = 0.0
    beta2: float = 0.0
    gamma: float = 1.0
    beta3: float = 0.0
    zeta: float = 1.0
    c_eps: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if not self.p > 1.0:
            raise ValueError(f"p must be > 1, got {self.p}")
        for name in ("theta", "beta1", "kappa", "beta2", "gamma", "beta3"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.zeta < 1.0:
            raise ValueError(f"zeta_ratio must be >= 1, got {self.zeta}")
        for eps, c in self.c_eps:
            if eps <= 0.0 or c < 0.0:
                raise ValueError(f"C_eps entries need eps > 0 and C >= 0, got ({eps}, {c})")

    def c_for(self, eps: float) -> float:
        """Best tabulated constant valid at eps: min C over tabulated eps_j <= eps."""
        candidates = [c for (e, c) in self.c_eps if e <= eps * (1.0 + 1e-12)]
        if not candidates:
            raise ThresholdError(
                f"no tabulated C_eps entry with eps <= {eps:g} "
                f"(table: {sorted(e for e, _ in self.c_eps)})"
            )
        return min(candidates)

    def has_c_for(self, eps: float) -> bool:
        return any(e <= eps * (1.0 + 1e-12) for e, _ in self.c_eps)


def a6_margin(constants: AssumptionConstants) -> float:
    """1 - [theta/p + (p-1) gamma (kappa/p + gamma/4)]; positive means (A6) holds."""
    p, th, ka, ga = constants.p, constants.theta, constants.kappa, constants.gamma
    return 1.0 - (th / p + (p - 1.0) * ga * (ka / p + ga / 4.0))


EPS_GRID = tuple(10.0 ** (-k / 4.0) for k in range(41))


@dataclass(frozen=True)
class Thresholds:
    eps0: float
    c_eps0: float
    lambda0: float
    rho0: float
    lambda1: float
    c_coercive: float
    c_ueps: float
    margin: float

    def to_dict(self) -> dict:
        return {
            "eps0": self.eps0,
            "C_eps0": self.c_eps0,
            "lambda0": self.lambda0,
            "rho0": self.rho0,
            "lambda1": self.lambda1,
            "C_coercive": self.c_coercive,
            "C_Ueps": self.c_ueps,
            "a6_margin": self.margin,
        }


def compute_thresholds(constants: AssumptionConstants, dim: int) -> Thresholds:
    """Admissible eps0 (largest on the dyadic-quarters grid) and derived levels.

    eps0 is the largest eps in {10^(-k/4) : k = 0..40} with a tabulated
    constant available such that

        1 - p^2 eps^2 - 2(p-2) eps - 2 eps sqrt(n) - 3 p kappa eps >= 1/2
        p - theta - (p-1) kappa eps > 0.

    Raises ThresholdError when (A6) fails or no grid point qualifies.
    """
    p, th, ka = constants.p, constants.theta, constants.kappa
    margin = a6_margin(constants)
    if margin <= 0.0:
        raise ThresholdError(
            f"structural margin 1 - [theta/p + (p-1)gamma(kappa/p + gamma/4)] = "
            f"{margin:.6g} is not positive"
        )
    sqrt_n = math.sqrt(dim)
    eps0 = None
    for eps in EPS_GRID:  # descending
        feasible = (
            1.0 - p * p * eps * eps - 2.0 * (p - 2.0) * eps - 2.0 * eps * sqrt_n - 3.0 * p * ka * eps
            >= 0.5
        )
        positive = p - th - (p - 1.0) * ka * eps > 0.0
        if feasible and positive and constants.has_c_for(eps):
            eps0 = eps
            break
    if eps0 is None:
        raise ThresholdError(
            "no admissible eps on the grid {10^(-k/4)}: check kappa/theta and "
            "the tabulated C_eps entries"
        )
    c0 = constants.c_for(eps0)
    lambda0 = (
        constants.beta1 / p
        + (p - 1.0) * ka * eps0 * constants.beta2 / p
        + (p - 1.0) * c0 / (p * p * eps0)
    )
    rho0 = (constants.beta1 + (p - 1.0) * ka * constants.gamma * constants.beta2 / 2.0) / p
    lambda1 = max(rho0, lambda0)
    c_coercive = (1.0 + p * ka * constants.gamma) / margin
    c_ueps = 8.0 * p * p / (p - 1.0)
    return Thresholds(eps0, c0, lambda0, rho0, lambda1, c_coercive, c_ueps, margin)


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Problem:
    manifold: EmbeddedManifold
    phi: ScalarField
    vector_field: VectorField
    potential: Potential
    h: ScalarField
    connection: Connection
    constants: AssumptionConstants
    label: str = ""

    @property
    def m(self) -> int:
        return self.connection.m

    @property
    def is_scalar(self) -> bool:
        return self.connection.is_scalar_trivial and self.potential.is_scalar


def u_epsilon(problem: Problem, c: np.ndarray, eps: float) -> np.ndarray:
    """U_eps = 4 (|d phi|^2 + C_eps / eps) at chart points."""
    c_const = problem.constants.c_for(eps)
    return 4.0 * (problem.phi.grad_norm_sq(c) + c_const / eps)


def drift_chart_components(problem: Problem, c: np.ndarray) -> np.ndarray:
    """Chart components of Z = X - grad(phi): X^i - g^{ij} d_j phi."""
    c = np.asarray(c, dtype=float)
    out = problem.vector_field.values(c)
    if not problem.phi.has_zero_gradient:
        ginv = problem.manifold.inverse_metric(c)
        out = out - np.einsum("...ij,...j->...i", ginv, problem.phi.grad(c))
    return out


def drift(problem: Problem, x: np.ndarray) -> np.ndarray:
    """Ambient drift vector of the diffusion at ambient points x."""
    man = problem.manifold
    c = man.to_chart(x)
    comps = drift_chart_components(problem, c)
    j = man.chart_jacobian(c)
    return np.einsum("...ai,...i->...a", j, comps)


def make_ambient_drift(problem: Problem):
    """Optimized drift closure; None when the drift vanishes identically."""
    if problem.vector_field.is_zero and problem.phi.has_zero_gradient:
        return None
    man = problem.manifold
    if man.name.startswith("euclidean"):
        vf, phi = problem.vector_field, problem.phi

        def _euclidean_drift(x):
            out = vf.values(x)
            if not phi.has_zero_gradient:
                out = out - phi.grad(x)
            return out

        return _euclidean_drift
    return lambda x: drift(problem, x)


# ---------------------------------------------------------------------------
# Assumption checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionCheck:
    condition: str
    margin: float
    passed: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "margin": self.margin,
            "passed": self.passed,
            "note": self.note,
        }


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple[ConditionCheck, ...]
    n_samples: int
    h_replaced_by_zero: bool = False

    @property
    def all_passed(self) -> bool:
        return all(ch.passed for ch in self.checks)

    def failing(self) -> tuple[ConditionCheck, ...]:
        return tuple(ch for ch in self.checks if not ch.passed)

    def to_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "n_samples": self.n_samples,
            "h_replaced_by_zero": self.h_replaced_by_zero,
            "checks": [ch.to_dict() for ch in self.checks],
        }


_MARGIN_TOL = 1e-9


def check_assumptions(
    problem: Problem,
    samples: np.ndarray | None = None,
    eps: float | None = None,
    replace_h_with_zero: bool = False,
) -> AssumptionReport:
    """Sampled margins for (V2), (A2)-(A6); a check passes when margin >= -1e-9.

    With ``replace_h_with_zero`` the h-dependent conditions are evaluated
    with h == 0 and the (V2)/(A5) checks are dropped -- the variant
    relevant for the probabilistic representation.
    """
    man = problem.manifold
    if samples is None:
        samples = man.sample_chart_coords(10000)
    samples = np.asarray(samples, dtype=float)
    cst = problem.constants
    checks: list[ConditionCheck] = []
    h_field = problem.h

    with np.errstate(over="ignore", invalid="ignore"):
        h_vals = np.zeros(samples.shape[0]) if replace_h_with_zero else h_field.value(samples)
        grad_phi_sq = problem.phi.grad_norm_sq(samples)

        if not replace_h_with_zero:
            hmin = float(np.min(h_vals))
            checks.append(
                ConditionCheck("h_nonneg", hmin, hmin >= -_MARGIN_TOL, "min h over samples")
            )
            if problem.potential.is_scalar:
                v_vals = problem.potential.scalar_values(samples)
                lower = float(np.min(v_vals - h_vals))
                upper = float(np.min(cst.zeta * h_vals - v_vals))
            else:
                v_mat = problem.potential.matrix_values(samples)
                eigs = np.linalg.eigvalsh(v_mat)
                lower = float(np.min(eigs[..., 0] - h_vals))
                upper = float(np.min(cst.zeta * h_vals - eigs[..., -1]))
            checks.append(
                ConditionCheck("V2_lower", lower, lower >= -_MARGIN_TOL, "min (V - h)")
            )
            checks.append(
                ConditionCheck(
                    "V2_upper", upper, upper >= -_MARGIN_TOL, "min (zeta h - V)"
                )
            )

        hess_phi = problem.phi.hess_norm(samples)
        pairs = [(eps, cst.c_for(eps))] if eps is not None else list(cst.c_eps)
        if pairs:
            a2 = min(
                float(np.min(e * grad_phi_sq + c - hess_phi)) for (e, c) in pairs
            )
            note = f"min over {len(pairs)} tabulated (eps, C) pair(s)"
        else:
            a2 = float(np.min(-hess_phi))
            note = "no tabulated pairs: requires Hess phi == 0"
        checks.append(ConditionCheck("A2", a2, a2 >= -_MARGIN_TOL, note))

        div_x = problem.vector_field.divergence(samples)
        x_phi = problem.vector_field.derivation(problem.phi, samples)
        a3 = float(np.min(div_x - x_phi + cst.theta * h_vals + cst.beta1))
        checks.append(
            ConditionCheck("A3", a3, a3 >= -_MARGIN_TOL, "min (div X - X phi + theta h + beta1)")
        )

        x_norm = problem.vector_field.norm(samples)
        bound = cst.kappa * np.sqrt(np.maximum(grad_phi_sq + h_vals + cst.beta2, 0.0))
        a4 = float(np.min(bound - x_norm))
        checks.append(ConditionCheck("A4", a4, a4 >= -_MARGIN_TOL, "min (kappa sqrt(.) - |X|)"))

        if not replace_h_with_zero:
            dh = np.sqrt(np.maximum(h_field.grad_norm_sq(samples), 0.0))
            with np.errstate(invalid="ignore"):
                a5 = float(np.min(cst.gamma * np.maximum(h_vals, 0.0) ** 1.5 + cst.beta3 - dh))
            checks.append(
                ConditionCheck("A5", a5, a5 >= -_MARGIN_TOL, "min (gamma h^{3/2} + beta3 - |dh|)")
            )

        m6 = a6_margin(cst)
        checks.append(ConditionCheck("A6", m6, m6 > 0.0, "structural margin (needs > 0)"))

    return AssumptionReport(tuple(checks), int(samples.shape[0]), replace_h_with_zero)


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------


def _parse_constants(raw: dict, path: str) -> AssumptionConstants:
    known = {"p", "theta", "beta1", "kappa", "beta2", "gamma", "beta3", "C_eps"}
    for key in raw:
        if key not in known:
            raise ConfigError(
                f"unknown constants key (known: {sorted(known)})",
                field_name=f"constants.{key}",
                config_path=path,
            )
    table = []
    for i, entry in enumerate(raw.get("C_eps", [])):
        if not isinstance(entry, dict) or "eps" not in entry or "C" not in entry:
            raise ConfigError(
                "each C_eps entry must be an object {eps, C}",
                field_name=f"constants.C_eps[{i}]",
                config_path=path,
            )
        table.append((float(entry["eps"]), float(entry["C"])))
    kwargs = {
        k: float(raw[k])
        for k in ("p", "theta", "beta1", "kappa", "beta2", "gamma", "beta3")
        if k in raw
    }
    try:
        return AssumptionConstants(c_eps=tuple(table), **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), field_name="constants", config_path=path) from exc


def _parse_omega(manifold, raw, m: int, path: str):
    if raw is None:
        return None
    if len(raw) != manifold.dim:
        raise ConfigError(
            f"omega must list {manifold.dim} matrices (one per chart direction)",
            field_name="connection.omega",
            config_path=path,
        )
    out = []
    for i, mat in enumerate(raw):
        if len(mat) != m or any(len(row) != m for row in mat):
            raise ConfigError(
                f"omega[{i}] must be an {m}x{m} matrix",
                field_name=f"connection.omega[{i}]",
                config_path=path,
            )
        rows = []
        for a, row in enumerate(mat):
            cols = []
            for b, entry in enumerate(row):
                where = f"connection.omega[{i}][{a}][{b}]"
                try:
                    if isinstance(entry, str):
                        re_f = ScalarField.parse(manifold, entry, where)
                        im_f = ScalarField.zero(manifold)
                    elif isinstance(entry, dict):
                        re_f = ScalarField.parse(manifold, entry.get("re", "0"), where + ".re")
                        im_f = ScalarField.parse(manifold, entry.get("im", "0"), where + ".im")
                    else:
                        raise ValueError("expected string or {re, im} object")
                except ValueError as exc:
                    raise ConfigError(str(exc), field_name=where, config_path=path) from exc
                cols.append((re_f, im_f))
            rows.append(tuple(cols))
        out.append(tuple(rows))
    return tuple(out)


def _validate_connection(manifold, conn: Connection, path: str) -> None:
    if conn.omega is None:
        return
    coords = manifold.sample_chart_coords(64)
    vals = conn.omega_values(coords)
    skew_defect = np.max(np.abs(vals + np.conj(np.swapaxes(vals, -1, -2))))
    if skew_defect > 1e-10:
        raise ConfigError(
            f"connection form must be anti-Hermitian (unitary transport); "
            f"max |omega + omega^H| = {skew_defect:.3e}",
            field_name="connection.omega",
            config_path=path,
        )


def _validate_matrix_potential(manifold, pot: Potential, path: str) -> None:
    if pot.is_scalar:
        return
    coords = manifold.sample_chart_coords(64)
    vals = pot.matrix_values(coords)
    sym_defect = np.max(np.abs(vals - np.swapaxes(vals, -1, -2)))
    if sym_defect > 1e-10:
        raise ConfigError(
            f"matrix potential must be symmetric; max |V - V^T| = {sym_defect:.3e}",
            field_name="V.matrix",
            config_path=path,
        )


_TOP_KEYS = {
    "manifold",
    "phi",
    "X",
    "V",
    "V_nonneg",
    "h",
    "zeta_ratio",
    "connection",
    "constants",
    "label",
}


def load_problem(source) -> Problem:
    """Load a Problem from a JSON file path or an already-parsed dict."""
    if isinstance(source, (str, Path)):
        path = str(source)
        try:
            with open(source, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("config file not found", field_name="<file>", config_path=path)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", field_name="<file>", config_path=path)
    else:
        path = "<dict>"
        raw = source
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", field_name="<root>", config_path=path)

    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(
                f"unknown key (known: {sorted(_TOP_KEYS)})", field_name=key, config_path=path
            )

    if "manifold" not in raw:
        raise ConfigError("required", field_name="manifold", config_path=path)
    try:
        manifold = make_manifold(raw["manifold"])
    except ValueError as exc:
        raise ConfigError(str(exc), field_name="manifold", config_path=path) from exc

    def _field(key: str, default: str) -> ScalarField:
        src = raw.get(key, default)
        if not isinstance(src, str):
            raise ConfigError("expected an expression string", field_name=key, config_path=path)
        try:
            return ScalarField.parse(manifold, src, key)
        except ValueError as exc:
            raise ConfigError(str(exc), field_name=key, config_path=path) from exc

    phi = _field("phi", "0")
    h_field = _field("h", "0")

    x_raw = raw.get("X", None)
    declared_div = None
    if x_raw is None:
        vector_field = VectorField.zero(manifold)
    else:
        if not isinstance(x_raw, dict) or "components" not in x_raw:
            raise ConfigError(
                "expected an object {components: [...], div?: '...'}",
                field_name="X",
                config_path=path,
            )
        try:
            vector_field = VectorField.parse(manifold, x_raw["components"], "X.components")
        except ValueError as exc:
            raise ConfigError(str(exc), field_name="X.components", config_path=path) from exc
        if "div" in x_raw:
            try:
                declared_div = ScalarField.parse(manifold, x_raw["div"], "X.div")
            except ValueError as exc:
                raise ConfigError(str(exc), field_name="X.div", config_path=path) from exc

    conn_raw = raw.get("connection", None)
    if conn_raw is None:
        connection = Connection("trivial", 1, None)
    else:
        bundle = conn_raw.get("bundle", "trivial")
        if bundle not in ("trivial", "tangent"):
            raise ConfigError(
                "bundle must be 'trivial' or 'tangent'",
                field_name="connection.bundle",
                config_path=path,
            )
        if bundle == "tangent":
            if "omega" in conn_raw and conn_raw["omega"] is not None:
                raise ConfigError(
                    "the tangent bundle uses metric (polar) transport; "
                    "an explicit connection form is only for trivial bundles",
                    field_name="connection.omega",
                    config_path=path,
                )
            m = manifold.dim
            if "m" in conn_raw and int(conn_raw["m"]) != m:
                raise ConfigError(
                    f"tangent bundle fiber dimension is {m}",
                    field_name="connection.m",
                    config_path=path,
                )
            connection = Connection("tangent", m, None)
        else:
            omega_raw = conn_raw.get("omega", None)
            if "m" in conn_raw:
                m = int(conn_raw["m"])
            elif omega_raw is not None:
                m = len(omega_raw[0])
            else:
                m = 1
            if m < 1:
                raise ConfigError("fiber dimension must be >= 1", field_name="connection.m", config_path=path)
            omega = _parse_omega(manifold, omega_raw, m, path)
            connection = Connection("trivial", m, omega)
    _validate_connection(manifold, connection, path)

    v_raw = raw.get("V", "0")
    if isinstance(v_raw, str):
        try:
            scalar_v = ScalarField.parse(manifold, v_raw, "V")
        except ValueError as exc:
            raise ConfigError(str(exc), field_name="V", config_path=path) from exc
        potential = Potential(m=connection.m, scalar=scalar_v)
    elif isinstance(v_raw, dict) and "matrix" in v_raw:
        mat_raw = v_raw["matrix"]
        mm = len(mat_raw)
        if connection.bundle == "trivial" and connection.m != mm:
            raise ConfigError(
                f"matrix potential is {mm}x{mm} but the bundle fiber dimension is {connection.m}",
                field_name="V.matrix",
                config_path=path,
            )
        rows = []
        for a, row in enumerate(mat_raw):
            if len(row) != mm:
                raise ConfigError("matrix must be square", field_name=f"V.matrix[{a}]", config_path=path)
            parsed = []
            for b, src in enumerate(row):
                try:
                    parsed.append(ScalarField.parse(manifold, src, f"V.matrix[{a}][{b}]"))
                except ValueError as exc:
                    raise ConfigError(str(exc), field_name=f"V.matrix[{a}][{b}]", config_path=path) from exc
            rows.append(tuple(parsed))
        potential = Potential(m=mm, matrix=tuple(rows))
    else:
        raise ConfigError(
            "expected an expression string or {matrix: [[...]]}", field_name="V", config_path=path
        )
    _validate_matrix_potential(manifold, potential, path)

    if "V_nonneg" in raw:
        nonneg = bool(raw["V_nonneg"])
    else:
        coords = manifold.sample_chart_coords(4096)
        with np.errstate(over="ignore", invalid="ignore"):
            if potential.is_scalar:
                vmin = float(np.min(potential.scalar_values(coords)))
            else:
                vmin = float(np.min(np.linalg.eigvalsh(potential.matrix_values(coords))))
        nonneg = vmin >= -1e-12
    potential = replace(potential, nonneg=nonneg)

    try:
        zeta = float(raw.get("zeta_ratio", 1.0))
    except (TypeError, ValueError):
        raise ConfigError("expected a number", field_name="zeta_ratio", config_path=path)

    constants_raw = raw.get("constants", {})
    if not isinstance(constants_raw, dict):
        raise ConfigError("expected an object", field_name="constants", config_path=path)
    constants = _parse_constants(constants_raw, path)
    try:
        constants = replace(constants, zeta=zeta)
    except ValueError as exc:
        raise ConfigError(str(exc), field_name="zeta_ratio", config_path=path) from exc

    label = raw.get("label", Path(path).stem if path != "<dict>" else "")

    problem = Problem(
        manifold=manifold,
        phi=phi,
        vector_field=vector_field,
        potential=potential,
        h=h_field,
        connection=connection,
        constants=constants,
        label=str(label),
    )

    if declared_div is not None:
        coords = manifold.sample_chart_coords(256)
        mismatch = float(
            np.max(np.abs(declared_div.value(coords) - vector_field.divergence(coords)))
        )
        if mismatch > 1e-6:
            raise ConfigError(
                f"declared divergence disagrees with the symbolic divergence of the "
                f"components (max |diff| = {mismatch:.3e} over {coords.shape[0]} samples)",
                field_name="X.div",
                config_path=path,
            )

    return problem
