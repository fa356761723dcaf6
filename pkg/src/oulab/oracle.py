"""Deterministic grid realization of the scalar operator and its estimates.

Periodic Fourier grids on the circle and the flat 2-torus give an
independent ground truth: spectral differentiation, weighted L^p norms,
a dense matrix semigroup, and a harness that measures every inequality
the package asserts (coercive bounds, gradient/Hessian bounds,
domination, separation, multiplier bounds, Calderon-Zygmund ratios,
integration by parts, and the curvature diagnostic).

Conventions: the Laplacian is nonnegative (Delta = -sum of second
derivatives on these flat charts); norms are mu-weighted
(d mu = e^{-phi} d vol) for the coercive families and unweighted for
domination, Calderon-Zygmund, and integration by parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .fields import (
    Problem,
    ScalarField,
    ThresholdError,
    Thresholds,
    check_assumptions,
    compute_thresholds,
    u_epsilon,
)
from .geometry import TWO_PI, EmbeddedManifold
from .rng import derived_seed

__all__ = [
    "PeriodicGrid",
    "GridFunction",
    "OperatorMatrix",
    "Suite",
    "HypothesisError",
    "Rk4StabilityError",
    "build_operator",
    "weighted_norm",
    "unweighted_norm",
    "inner_product",
    "semigroup_apply",
    "twisted_circle_semigroup",
    "make_suite",
    "check_inequality_family",
    "check_ibp",
    "sc_diagnostic",
    "FAMILIES",
    "InequalityReport",
]


class HypothesisError(RuntimeError):
    """An inequality's structural hypotheses do not hold for this problem."""


class Rk4StabilityError(RuntimeError):
    """The RK4 stability bound demands an unreasonable number of steps."""


# ---------------------------------------------------------------------------
# Grids and grid functions
# ---------------------------------------------------------------------------


class PeriodicGrid:
    """Uniform Fourier grid on the circle (N) or flat 2-torus (N x N).

    Spectral derivative conventions: odd-order derivatives zero the
    Nyquist mode; the pure second derivative keeps it (multiplier -k^2).
    """

    def __init__(self, manifold: EmbeddedManifold, n: int):
        if manifold.name not in ("circle", "torus2"):
            raise ValueError(
                f"no periodic grid for {manifold.name}: use the Monte Carlo "
                "estimator for spheres and Euclidean space"
            )
        if n < 8 or n % 2 != 0:
            raise ValueError(f"grid size must be even and >= 8, got {n}")
        self.manifold = manifold
        self.n = int(n)
        self.dim = manifold.dim
        self.shape = (self.n,) * self.dim
        self.size = self.n**self.dim
        self.spacing = TWO_PI / self.n
        self.cellvol = self.spacing**self.dim
        axis = np.arange(self.n) * self.spacing
        if self.dim == 1:
            self.coords = axis[:, None]
        else:
            t1, t2 = np.meshgrid(axis, axis, indexing="ij")
            self.coords = np.stack([t1, t2], axis=-1)
        k = np.fft.fftfreq(self.n, d=1.0 / self.n)
        self._ik1 = 1j * np.where(np.abs(k) == self.n // 2, 0.0, k)
        self._mk2 = -(k**2)

    # -- node values ------------------------------------------------------
    def values_of(self, fld: ScalarField) -> np.ndarray:
        return fld.value(self.coords)

    def as_array(self, u) -> np.ndarray:
        v = u.values if isinstance(u, GridFunction) else np.asarray(u)
        if v.shape != self.shape:
            raise ValueError(f"expected node values of shape {self.shape}, got {v.shape}")
        return v

    # -- spectral calculus --------------------------------------------------
    def partial(self, u, axis: int = 0) -> np.ndarray:
        v = self.as_array(u).astype(complex)
        f = np.fft.fft(v, axis=axis)
        f *= np.reshape(self._ik1, (-1,) + (1,) * (self.dim - 1 - axis))
        return np.fft.ifft(f, axis=axis)

    def second(self, u, ax1: int, ax2: int) -> np.ndarray:
        if ax1 == ax2:
            v = self.as_array(u).astype(complex)
            f = np.fft.fft(v, axis=ax1)
            f *= np.reshape(self._mk2, (-1,) + (1,) * (self.dim - 1 - ax1))
            return np.fft.ifft(f, axis=ax1)
        return self.partial(self.partial(u, ax1), ax2)

    def grad(self, u) -> np.ndarray:
        """Stacked partials, shape (dim,) + grid shape."""
        return np.stack([self.partial(u, ax) for ax in range(self.dim)])

    def hessian(self, u) -> np.ndarray:
        """Covariant Hessian entries (flat charts), shape (dim, dim) + grid."""
        return np.stack(
            [
                np.stack([self.second(u, i, j) for j in range(self.dim)])
                for i in range(self.dim)
            ]
        )

    def lap(self, u) -> np.ndarray:
        """Nonnegative Laplacian: -sum of pure second derivatives."""
        out = -self.second(u, 0, 0)
        for ax in range(1, self.dim):
            out = out - self.second(u, ax, ax)
        return out

    def grad_norm(self, u) -> np.ndarray:
        g = self.grad(u)
        return np.sqrt(np.sum(np.abs(g) ** 2, axis=0))

    def hess_norm(self, u) -> np.ndarray:
        h = self.hessian(u)
        return np.sqrt(np.sum(np.abs(h) ** 2, axis=(0, 1)))

    # -- dense derivative matrices ------------------------------------------
    def d1_matrix(self) -> np.ndarray:
        f = np.fft.fft(np.eye(self.n), axis=0)
        return np.real(np.fft.ifft(self._ik1[:, None] * f, axis=0))

    def d2_matrix(self) -> np.ndarray:
        f = np.fft.fft(np.eye(self.n), axis=0)
        return np.real(np.fft.ifft(self._mk2[:, None] * f, axis=0))


@dataclass(frozen=True)
class GridFunction:
    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(v.real)) or not np.all(np.isfinite(v.imag)):
            raise ValueError("grid function contains non-finite values")


# ---------------------------------------------------------------------------
# Norms and inner products
# ---------------------------------------------------------------------------


def _phi_weight(grid: PeriodicGrid, phi) -> np.ndarray | None:
    if phi is None:
        return None
    vals = grid.values_of(phi) if isinstance(phi, ScalarField) else grid.as_array(phi)
    return np.exp(-vals)


def weighted_norm(grid: PeriodicGrid, u, p: float, phi=None) -> float:
    """( sum |u|^p e^{-phi} cellvol )^{1/p} over the nodes.

    ``u`` may be node values or a pointwise fiber norm already;
    ``phi`` may be None (volume measure), a ScalarField, or node values.
    """
    if not 1.0 <= p < math.inf:
        raise ValueError(f"p must be in [1, inf), got {p}")
    vals = np.abs(u.values if isinstance(u, GridFunction) else np.asarray(u))
    w = _phi_weight(grid, phi)
    integrand = vals**p if w is None else vals**p * w
    return float(np.sum(integrand) * grid.cellvol) ** (1.0 / p)


def unweighted_norm(grid: PeriodicGrid, u, p: float) -> float:
    return weighted_norm(grid, u, p, None)


def inner_product(grid: PeriodicGrid, a, b, phi=None) -> complex:
    """Quadrature inner product, conjugate-linear in the second slot.

    Accepts node arrays or stacked component arrays (forms): any equal
    shapes whose trailing dims match the grid.
    """
    av = np.asarray(a.values if isinstance(a, GridFunction) else a)
    bv = np.asarray(b.values if isinstance(b, GridFunction) else b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch {av.shape} vs {bv.shape}")
    prod = av * np.conj(bv)
    w = _phi_weight(grid, phi)
    if w is not None:
        prod = prod * w
    return complex(np.sum(prod) * grid.cellvol)


# ---------------------------------------------------------------------------
# The scalar operator: matrix-free application and dense assembly
# ---------------------------------------------------------------------------


def _drift_coefficients(problem: Problem, grid: PeriodicGrid):
    """Node values of (grad phi components, X components), or None if zero."""
    phi_grad = None if problem.phi.has_zero_gradient else problem.phi.grad(grid.coords)
    x_vals = None if problem.vector_field.is_zero else problem.vector_field.values(grid.coords)
    return phi_grad, x_vals


def apply_operator(problem: Problem, grid: PeriodicGrid, u) -> np.ndarray:
    """H u = lap(u) + grad(phi).du - X.du + V u at the nodes (matrix-free)."""
    if not problem.potential.is_scalar:
        raise ValueError("the grid oracle realizes scalar potentials only")
    v = grid.as_array(u).astype(complex)
    out = grid.lap(v)
    phi_grad, x_vals = _drift_coefficients(problem, grid)
    if phi_grad is not None or x_vals is not None:
        du = grid.grad(v)
        coef = 0.0
        if phi_grad is not None:
            coef = np.moveaxis(phi_grad, -1, 0)
        if x_vals is not None:
            coef = coef - np.moveaxis(x_vals, -1, 0)
        out = out + np.sum(coef * du, axis=0)
    if not problem.potential.scalar.is_zero:
        out = out + grid.values_of(problem.potential.scalar) * v
    return out


@dataclass(frozen=True)
class OperatorMatrix:
    """Dense realization of the scalar operator on ravelled node values."""

    grid: PeriodicGrid
    matrix: np.ndarray
    lap_matrix: np.ndarray
    potential_diag: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def build_operator(problem: Problem, grid: PeriodicGrid) -> OperatorMatrix:
    """Dense matrix of H = Delta + grad(phi).d - X.d + V on grid nodes.

    Supported: scalar potential on circle or torus2 (raise elsewhere);
    node ordering is C-order ravel of the coordinate array.
    """
    if not problem.potential.is_scalar:
        raise ValueError("the grid oracle realizes scalar potentials only")
    if problem.manifold.name != grid.manifold.name:
        raise ValueError("problem and grid manifolds differ")
    n, dim = grid.n, grid.dim
    d1 = grid.d1_matrix()
    d2 = grid.d2_matrix()
    eye = np.eye(n)
    if dim == 1:
        lap = -d2
        firsts = [d1]
    else:
        lap = -(np.kron(d2, eye) + np.kron(eye, d2))
        firsts = [np.kron(d1, eye), np.kron(eye, d1)]

    h = lap.copy()
    phi_grad, x_vals = _drift_coefficients(problem, grid)
    for ax, dmat in enumerate(firsts):
        coef = np.zeros(grid.size)
        if phi_grad is not None:
            coef += phi_grad[..., ax].ravel()
        if x_vals is not None:
            coef -= x_vals[..., ax].ravel()
        if np.any(coef):
            h += coef[:, None] * dmat
    vdiag = np.zeros(grid.size)
    if not problem.potential.scalar.is_zero:
        vdiag = grid.values_of(problem.potential.scalar).ravel()
        h[np.arange(grid.size), np.arange(grid.size)] += vdiag
    return OperatorMatrix(grid=grid, matrix=h, lap_matrix=lap, potential_diag=vdiag)


def semigroup_apply(op: OperatorMatrix, f, t: float, backend: str = "both"):
    """u(t) with du/dt = -H u, u(0) = f.

    backend 'expm' (scaling-and-squaring), 'rk4' (explicit, step chosen
    from the spectral-symbol stability bound), or 'both' (computes the
    two and insists they agree to 1e-8, returning the expm result).
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    grid = op.grid
    v = grid.as_array(f).astype(complex).ravel()
    if t == 0.0:
        return v.reshape(grid.shape)
    if backend not in ("expm", "rk4", "both"):
        raise ValueError(f"unknown backend {backend!r}")

    res_expm = res_rk4 = None
    if backend in ("expm", "both"):
        res_expm = scipy.linalg.expm(-t * op.matrix) @ v
    if backend in ("rk4", "both"):
        res_rk4 = _rk4_semigroup(op, v, t)
    if backend == "expm":
        return res_expm.reshape(grid.shape)
    if backend == "rk4":
        return res_rk4.reshape(grid.shape)
    scale = max(1.0, float(np.max(np.abs(res_expm))))
    dev = float(np.max(np.abs(res_expm - res_rk4))) / scale
    if dev > 1e-8:
        raise FloatingPointError(
            f"semigroup backends disagree: relative deviation {dev:.3e} > 1e-8"
        )
    return res_expm.reshape(grid.shape)


def _rk4_semigroup(op: OperatorMatrix, v: np.ndarray, t: float) -> np.ndarray:
    grid = op.grid
    kmax = grid.n // 2
    bound = grid.dim * kmax**2 + float(np.max(np.abs(op.potential_diag), initial=0.0))
    drift = op.matrix - op.lap_matrix - np.diag(op.potential_diag)
    bound += float(np.max(np.sum(np.abs(drift), axis=1)))
    dt = 2.0 / (1.25 * bound)
    steps = int(math.ceil(t / dt))
    if steps > 5_000_000:
        raise Rk4StabilityError(
            f"stability bound needs {steps} RK4 steps for t={t}; use expm"
        )
    dt = t / steps
    h = op.matrix
    u = v.copy()
    for _ in range(steps):
        k1 = h @ u
        k2 = h @ (u - 0.5 * dt * k1)
        k3 = h @ (u - 0.5 * dt * k2)
        k4 = h @ (u - dt * k3)
        u = u - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


def twisted_circle_semigroup(a: float, grid: PeriodicGrid, f, t: float) -> np.ndarray:
    """e^{-tH} f for the circle with connection form i a d(theta), V = 0.

    Fourier modes e^{i k theta} are eigensections with eigenvalue
    (k + a)^2, so the semigroup is diagonal in the shifted basis.
    """
    if grid.dim != 1:
        raise ValueError("twisted semigroup is a circle oracle")
    v = grid.as_array(f).astype(complex)
    k = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
    fhat = np.fft.fft(v)
    return np.fft.ifft(fhat * np.exp(-t * (k + a) ** 2))


# ---------------------------------------------------------------------------
# Canonical test suites
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Suite:
    functions: tuple
    kind: str
    size: int
    seed: int

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": self.size, "seed": self.seed}


_SUITE_CACHE: dict = {}


def _mode_coefficient(seed_member: int, k1: int, k2: int) -> complex:
    key2 = ((k1 + 512) << 32) | (k2 + 512)
    g = np.random.Generator(np.random.Philox(key=[seed_member, key2]))
    d = g.normal(size=2)
    return complex(d[0], d[1]) / math.sqrt(2.0)


def make_suite(grid: PeriodicGrid, size: int = 50, seed: int = 0, decay: float = 0.5) -> Suite:
    """Random trigonometric polynomials, degree <= N/4, seeded.

    The coefficient of a given Fourier mode depends only on (seed,
    member, mode) — never on N — so refining the grid extends the same
    functions with exponentially damped new modes (weight decay^|k|).
    """
    cache_key = (grid.manifold.name, grid.n, size, seed, decay)
    cached = _SUITE_CACHE.get(cache_key)
    if cached is not None:
        return cached
    kmax = grid.n // 4
    funcs = []
    for member in range(size):
        seed_member = derived_seed(seed, member)
        chat = np.zeros(grid.shape, dtype=complex)
        if grid.dim == 1:
            for k in range(1, kmax + 1):
                for sk in (k, -k):
                    chat[sk % grid.n] = _mode_coefficient(seed_member, sk, 0) * decay**k
        else:
            for k1 in range(-kmax, kmax + 1):
                for k2 in range(-kmax, kmax + 1):
                    r = max(abs(k1), abs(k2))
                    if r == 0 or r > kmax:
                        continue
                    chat[k1 % grid.n, k2 % grid.n] = (
                        _mode_coefficient(seed_member, k1, k2) * decay**r
                    )
        vals = np.fft.ifft2(chat) * grid.size if grid.dim == 2 else np.fft.ifft(chat) * grid.n
        funcs.append(GridFunction(grid, vals))
    suite = Suite(
        functions=tuple(funcs),
        kind=f"random trigonometric polynomials, degree <= {kmax}, coefficient decay {decay}",
        size=size,
        seed=seed,
    )
    _SUITE_CACHE[cache_key] = suite
    return suite


# ---------------------------------------------------------------------------
# Inequality families
# ---------------------------------------------------------------------------

FAMILIES = (
    "coercive",
    "ueps",
    "grad_coercive",
    "hess_coercive",
    "domination",
    "separation",
    "multiplier_grad",
    "multiplier_sq",
    "cz",
)

_LAMBDA_SWEEP_FRACTIONS = (0.0, 1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)


@dataclass
class InequalityReport:
    family: str
    p: float
    lam: float | None
    proved_constant: float | None
    empirical_constant: float
    worst_ratio: float
    passed: bool | None
    suite: Suite
    ratios: list[float] = field(default_factory=list)
    lambda_sweep: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "p": self.p,
            "lambda": self.lam,
            "proved_constant": self.proved_constant,
            "empirical_constant": self.empirical_constant,
            "worst_ratio": self.worst_ratio,
            "pass": self.passed,
            "suite": self.suite.to_dict(),
        }
        if self.lambda_sweep:
            out["lambda_sweep"] = self.lambda_sweep
        if self.extra:
            out.update(self.extra)
        return out


def _require(condition: bool, message: str, force: bool, notes: list):
    if condition:
        return
    if not force:
        raise HypothesisError(message + " (pass force=True to evaluate anyway)")
    notes.append(message + " (forced)")


def _problem_with_h_replaced_by_v(problem: Problem) -> Problem:
    from dataclasses import replace

    return replace(problem, h=problem.potential.scalar)


def _suite_pieces(problem: Problem, grid: PeriodicGrid, suite: Suite, lam: float):
    """Per-member node arrays used by several families."""
    out = []
    for gf in suite.functions:
        u = gf.values
        hu = apply_operator(problem, grid, u)
        out.append((u, hu + lam * u))
    return out


def check_inequality_family(
    problem: Problem,
    family: str,
    grid_n: int = 128,
    lam: float | None = None,
    suite: Suite | None = None,
    p: float | None = None,
    eps_list=(0.25, 0.5, 1.0),
    seed: int = 0,
    force: bool = False,
    sweep: bool = True,
) -> InequalityReport:
    """Measure one inequality family over a test suite and report ratios.

    Families with a proved constant (coercive, ueps, separation) gate on
    check_assumptions and on lambda >= the computed threshold, and set
    ``passed``; the rest report their empirical constant (worst ratio).
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    if not problem.potential.is_scalar:
        raise ValueError("inequality families use the scalar operator")
    man = problem.manifold
    grid = PeriodicGrid(man, grid_n)
    if suite is None:
        suite = make_suite(grid, size=50, seed=seed)
    if p is None:
        p = problem.constants.p
    notes: list[str] = []

    consts = problem.constants
    coords = grid.coords
    mu_phi = None if problem.phi.is_zero else problem.phi

    thresholds: Thresholds | None = None
    if family in ("coercive", "ueps", "separation", "grad_coercive", "hess_coercive"):
        gate_problem = problem
        if family in ("grad_coercive", "hess_coercive"):
            gate_problem = _problem_with_h_replaced_by_v(problem)
        report = check_assumptions(gate_problem)
        failing = ", ".join(ch.condition for ch in report.failing())
        _require(
            report.all_passed,
            f"structural assumptions fail: {failing}",
            force,
            notes,
        )
        try:
            thresholds = compute_thresholds(gate_problem.constants, man.dim)
        except ThresholdError as exc:
            if family == "ueps" or not force:
                raise HypothesisError(str(exc)) from exc
            notes.append(f"thresholds unavailable: {exc} (forced)")

    lam_default = None
    if thresholds is not None:
        lam_default = thresholds.lambda0 if family == "ueps" else thresholds.lambda1
    if family in ("multiplier_grad", "multiplier_sq", "cz", "domination"):
        lam_used = None
    else:
        lam_used = lam if lam is not None else lam_default
        if lam_used is None:
            lam_used = 0.0
        if lam_default is not None:
            _require(
                lam_used >= lam_default - 1e-12,
                f"lambda = {lam_used} is below the computed threshold {lam_default}",
                force,
                notes,
            )

    if family == "separation":
        _require(
            problem.phi.is_zero and problem.vector_field.is_zero,
            "separation assumes phi = 0 and X = 0",
            force,
            notes,
        )
        gamma_cap = 2.0 / math.sqrt(p - 1.0)
        _require(
            0.0 < consts.gamma < gamma_cap,
            f"separation needs 0 < gamma < 2/sqrt(p-1) = {gamma_cap:.6g}",
            force,
            notes,
        )

    proved_constant: float | None = None
    extra: dict = {}
    ratios: list[float] = []

    def ratio_driver(lam_val: float) -> list[float]:
        """Family ratios as functions of lambda (for the sweep)."""
        pieces = _suite_pieces(problem, grid, suite, lam_val)
        out = []
        for u, hlu in pieces:
            denom = weighted_norm(grid, hlu, p, mu_phi)
            if family == "coercive":
                num = weighted_norm(grid, problem.h.value(coords) * u, p, mu_phi)
            elif family == "ueps":
                num = weighted_norm(
                    grid, u_epsilon(problem, coords, thresholds.eps0) * u, p, mu_phi
                )
            elif family == "separation":
                num = weighted_norm(
                    grid, problem.potential.scalar.value(coords) * u, p, mu_phi
                )
            elif family == "grad_coercive":
                wgt = np.sqrt(
                    problem.phi.grad_norm_sq(coords)
                    + problem.potential.scalar.value(coords)
                    + 1.0
                )
                num = weighted_norm(grid, wgt * grid.grad_norm(u), p, mu_phi)
            elif family == "hess_coercive":
                num = weighted_norm(grid, grid.hess_norm(u), p, mu_phi)
            else:  # pragma: no cover - guarded by caller
                raise AssertionError(family)
            out.append(num / denom)
        return out

    if family in ("coercive", "ueps", "separation", "grad_coercive", "hess_coercive"):
        ratios = ratio_driver(lam_used)
        if family == "coercive":
            proved_constant = (1.0 + p * consts.kappa * consts.gamma) / (
                thresholds.margin if thresholds else _margin_or_nan(consts)
            )
        elif family == "ueps":
            proved_constant = 8.0 * p * p / (p - 1.0)
        elif family == "separation":
            proved_constant = consts.zeta * (
                thresholds.c_coercive if thresholds else _coercive_or_nan(consts)
            )
    elif family == "domination":
        u_weight = (
            problem.phi.grad_norm_sq(coords)
            + problem.potential.scalar.value(coords)
            + 1.0
        )
        c_hats = {}
        for eps in eps_list:
            worst = 0.0
            for gf in suite.functions:
                v = gf.values
                num = unweighted_norm(grid, np.sqrt(u_weight) * grid.grad_norm(v), p)
                lapn = unweighted_norm(grid, grid.lap(v), p)
                uvn = unweighted_norm(grid, u_weight * v, p)
                worst = max(worst, max(0.0, (num - eps * lapn) / uvn))
            c_hats[eps] = worst
        extra["C_hat_per_eps"] = {repr(float(k)): v for k, v in c_hats.items()}
        ratios = [c_hats[eps] for eps in eps_list]
    elif family == "multiplier_grad":
        dphi = np.sqrt(problem.phi.grad_norm_sq(coords))
        for gf in suite.functions:
            v = gf.values
            num = weighted_norm(grid, dphi * v, p, mu_phi)
            den = weighted_norm(grid, v, p, mu_phi) + weighted_norm(
                grid, grid.grad_norm(v), p, mu_phi
            )
            ratios.append(num / den)
    elif family == "multiplier_sq":
        dphi2 = problem.phi.grad_norm_sq(coords)
        for gf in suite.functions:
            v = gf.values
            num = weighted_norm(grid, dphi2 * v, p, mu_phi)
            den = (
                weighted_norm(grid, v, p, mu_phi)
                + weighted_norm(grid, grid.grad_norm(v), p, mu_phi)
                + weighted_norm(grid, grid.hess_norm(v), p, mu_phi)
            )
            ratios.append(num / den)
    elif family == "cz":
        affine = []
        for gf in suite.functions:
            v = gf.values
            hn = unweighted_norm(grid, grid.hess_norm(v), p)
            lapn = unweighted_norm(grid, grid.lap(v), p)
            un = unweighted_norm(grid, v, p)
            ratios.append(hn / lapn)
            affine.append(hn / (lapn + un))
        extra["cz_affine_constant"] = max(affine)

    worst = max(ratios) if ratios else math.nan
    passed = None if proved_constant is None else bool(worst <= proved_constant + 1e-12)
    report = InequalityReport(
        family=family,
        p=p,
        lam=lam_used,
        proved_constant=proved_constant,
        empirical_constant=worst,
        worst_ratio=worst,
        passed=passed,
        suite=suite,
        ratios=ratios,
        extra=extra,
    )
    if notes:
        report.extra["hypothesis_notes"] = notes

    if (
        sweep
        and proved_constant is not None
        and lam_used is not None
        and family in ("coercive", "ueps", "separation")
    ):
        sweep_rows = []
        lam_star = None
        for frac in _LAMBDA_SWEEP_FRACTIONS:
            lam_try = frac * lam_used
            w = max(ratio_driver(lam_try)) if lam_try != lam_used else worst
            ok = bool(w <= proved_constant + 1e-12)
            sweep_rows.append({"lambda": lam_try, "worst_ratio": w, "pass": ok})
            if ok and lam_star is None:
                lam_star = lam_try
        report.lambda_sweep = sweep_rows
        report.extra["lambda_star"] = lam_star
    return report


def _margin_or_nan(consts) -> float:
    from .fields import a6_margin

    m = a6_margin(consts)
    return m if m > 0 else math.nan


def _coercive_or_nan(consts) -> float:
    m = _margin_or_nan(consts)
    return (1.0 + consts.p * consts.kappa * consts.gamma) / m


# ---------------------------------------------------------------------------
# Integration by parts
# ---------------------------------------------------------------------------


def check_ibp(problem: Problem, grid: PeriodicGrid, u, w, p: float | None = None):
    """Residuals of the two integration-by-parts identities (volume measure).

    residual1 = |(lap u + grad(phi).du, w) - (du, dw) - (u, lap(phi) w)
                 + (u, grad(phi).dw)|
    residual2 = |(-X.du + V u, w) + (1/q)(X.du, w) - (1/p)(u, X.dw)
                 - ((V + div(X)/p) u, w)|,  1/p + 1/q = 1.
    """
    if p is None:
        p = problem.constants.p
    q = p / (p - 1.0)
    uv = grid.as_array(u).astype(complex)
    wv = grid.as_array(w).astype(complex)
    coords = grid.coords

    du = grid.grad(uv)
    dw = grid.grad(wv)
    phi_grad = problem.phi.grad(coords)
    phi_dir_u = np.sum(np.moveaxis(phi_grad, -1, 0) * du, axis=0)
    phi_dir_w = np.sum(np.moveaxis(phi_grad, -1, 0) * dw, axis=0)
    lap_phi = problem.phi.laplacian(coords)

    lhs1 = inner_product(grid, grid.lap(uv) + phi_dir_u, wv)
    rhs1 = (
        inner_product(grid, du, dw)
        + inner_product(grid, uv, lap_phi * wv)
        - inner_product(grid, uv, phi_dir_w)
    )
    residual1 = abs(lhs1 - rhs1)

    x_vals = problem.vector_field.values(coords)
    x_du = np.sum(np.moveaxis(x_vals, -1, 0) * du, axis=0)
    x_dw = np.sum(np.moveaxis(x_vals, -1, 0) * dw, axis=0)
    div_x = problem.vector_field.divergence(coords)
    v_vals = problem.potential.scalar_values(coords)

    lhs2 = inner_product(grid, -x_du + v_vals * uv, wv)
    rhs2 = (
        -(1.0 / q) * inner_product(grid, x_du, wv)
        + (1.0 / p) * inner_product(grid, uv, x_dw)
        + inner_product(grid, (v_vals + div_x / p) * uv, wv)
    )
    residual2 = abs(lhs2 - rhs2)
    return residual1, residual2


# ---------------------------------------------------------------------------
# Curvature diagnostic
# ---------------------------------------------------------------------------


def sc_diagnostic(problem: Problem, samples: np.ndarray | None = None, seed: int = 0) -> float:
    """min over points and 16 random unit tangent directions W of
    ricci_lower + Hess(phi)(W, W): a finite lower bound for the drift
    curvature condition behind stochastic completeness."""
    man = problem.manifold
    if samples is None:
        samples = man.sample_chart_coords(256)
    samples = np.asarray(samples, dtype=float)
    hess = problem.phi.covariant_hessian(samples)  # (n_pts, dim, dim)
    metric = man.metric(samples)
    gen = np.random.Generator(np.random.Philox(key=[derived_seed(seed, 97), 0]))
    best = math.inf
    for _ in range(16):
        w = gen.normal(size=(samples.shape[0], man.dim))
        norm2 = np.einsum("...ij,...i,...j->...", metric, w, w)
        w = w / np.sqrt(norm2)[..., None]
        quad = np.einsum("...ij,...i,...j->...", hess, w, w)
        best = min(best, float(np.min(man.ricci_lower + quad)))
    return best
