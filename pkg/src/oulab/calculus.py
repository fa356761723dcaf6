"""Property-test battery for the differential calculus toolbox.

Each rule is an identity between spectrally computed quantities on a
periodic grid (circle or flat 2-torus).  The formal adjoints d-dagger /
nabla-dagger are realized as quadrature transposes of the spectral
derivative operators: on these uniform grids that is the Fourier
multiplier conjugate, i.e. d-dagger of a one-form is minus the sum of
component derivatives, and likewise for the connection with its
anti-Hermitian form absorbed.

Rules (scalar f, w; section u; vector field Z; one-form sigma):
    p1  d(fw) = (df) w + f dw
    p2  d+(f sigma) = f d+sigma - <df, sigma>
    p3  d+(f dw) = f lap(w) - <df, dw>
    p4  lap(fw) = f lap(w) - 2 <df, dw> + w lap(f)
    p5  Hess(fw) = f Hess w + df (x) dw + dw (x) df + w Hess f
    p6  nabla(fu) = f nabla u + df (x) u
    p7  nabla_Z (fu) = f nabla_Z u + (Zf) u
    p8  nabla+(f nabla u) = f nabla+nabla u - nabla_{grad f} u
    p9  nabla+nabla(fu) = f nabla+nabla u - 2 nabla_{grad f} u + u lap(f)
    c1  d(f o w) = f'(w) dw
    c2  lap(f o w) = -f''(w) |dw|^2 + f'(w) lap(w)
    c3  Hess(f o w) = f''(w) dw (x) dw + f'(w) Hess w
    lap_hess  |lap w| <= sqrt(n) |Hess w|  (signed margin, <= 0)

The Hessian product in p5 is the symmetrized tensor product (the
Hessian of a product is symmetric, so the cross term must be).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .fields import Connection, ScalarField
from .geometry import EmbeddedManifold, make_manifold
from .oracle import PeriodicGrid
from .rng import derived_seed

__all__ = [
    "RULES",
    "SCALAR_RULES",
    "BUNDLE_RULES",
    "verify_rule",
    "run_rules",
    "write_rules_csv",
    "default_bundle_connection",
    "RuleResult",
]

SCALAR_RULES = ("p1", "p2", "p3", "p4", "p5", "c1", "c2", "c3", "lap_hess")
BUNDLE_RULES = ("p6", "p7", "p8", "p9")
RULES = ("p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8", "p9", "c1", "c2", "c3", "lap_hess")

#: residual tolerance for the equality rules (sup norm, per trial)
EQUALITY_TOL = 1e-7
#: signed-margin tolerance for the Laplacian-Hessian inequality
LAP_HESS_TOL = 1e-10


def default_bundle_connection(manifold: EmbeddedManifold) -> Connection:
    """TrivialBundle(2) with omega = i diag(1, 2) d(theta_1)."""
    zero = ScalarField.zero(manifold)
    one = ScalarField.parse(manifold, "1")
    two = ScalarField.parse(manifold, "2")
    first = ((zero, one), (zero, zero)), ((zero, zero), (zero, two))
    omega = [first]
    for _ in range(manifold.dim - 1):
        omega.append((((zero, zero), (zero, zero)), ((zero, zero), (zero, zero))))
    return Connection(bundle="trivial", m=2, omega=tuple(omega))


# ---------------------------------------------------------------------------
# Spectral workbench
# ---------------------------------------------------------------------------


class _Workbench:
    """Grid calculus on scalars (grid shape) and sections (grid shape + (m,))."""

    def __init__(self, grid: PeriodicGrid, connection: Connection | None = None):
        self.grid = grid
        self.dim = grid.dim
        self.conn = connection
        if connection is not None:
            self.omega = connection.omega_values(grid.coords)  # (..., dim, m, m)
            self.m = connection.m
        else:
            self.omega = None
            self.m = None

    # -- scalar calculus ---------------------------------------------------
    def d(self, w) -> np.ndarray:
        return self.grid.grad(w)  # (dim,) + shape

    def lap(self, w) -> np.ndarray:
        return self.grid.lap(w)

    def hess(self, w) -> np.ndarray:
        return self.grid.hessian(w)  # (dim, dim) + shape

    def d_dagger(self, sigma) -> np.ndarray:
        """Adjoint of d on one-forms: minus the divergence (flat metric)."""
        out = -self.grid.partial(sigma[0], 0)
        for ax in range(1, self.dim):
            out = out - self.grid.partial(sigma[ax], ax)
        return out

    @staticmethod
    def pair(a, b) -> np.ndarray:
        """Unconjugated metric pairing of one-forms <a, b> (flat metric)."""
        return np.sum(a * b, axis=0)

    # -- bundle calculus -----------------------------------------------------
    def nabla(self, u) -> np.ndarray:
        """(dim,) + shape + (m,): partial_i u + omega_i u."""
        parts = [
            np.stack([self.grid.partial(u[..., a], ax) for a in range(self.m)], axis=-1)
            for ax in range(self.dim)
        ]
        du = np.stack(parts)
        om = np.moveaxis(self.omega, -3, 0)  # (dim,) + shape + (m, m)
        return du + np.einsum("d...ab,...b->d...a", om, u)

    def nabla_dagger(self, sigma) -> np.ndarray:
        """Adjoint of nabla on E-valued one-forms: -sum_i (partial_i + omega_i)."""
        om = np.moveaxis(self.omega, -3, 0)
        out = 0.0
        for ax in range(self.dim):
            d_ax = np.stack(
                [self.grid.partial(sigma[ax][..., a], ax) for a in range(self.m)],
                axis=-1,
            )
            out = out - d_ax - np.einsum("...ab,...b->...a", om[ax], sigma[ax])
        return out

    def bochner(self, u) -> np.ndarray:
        return self.nabla_dagger(self.nabla(u))

    def nabla_dir(self, z, u) -> np.ndarray:
        """nabla_Z u for chart components z: (dim,) + shape."""
        nu = self.nabla(u)
        return np.einsum("d...,d...a->...a", z, nu)


def _sup(x) -> float:
    return float(np.max(np.abs(x)))


_MODE_CACHE: dict = {}


def _mode_table(dim: int, degree: int):
    """Mode indices (modes, dim) and radii max|k_i|, excluding the zero mode."""
    key = (dim, degree)
    if key not in _MODE_CACHE:
        axes = [np.arange(-degree, degree + 1)] * dim
        ks = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        radii = np.max(np.abs(ks), axis=1)
        keep = radii > 0
        _MODE_CACHE[key] = (ks[keep], radii[keep])
    return _MODE_CACHE[key]


def _synth_scalar(grid: PeriodicGrid, gen: np.random.Generator, degree: int, decay: float,
                  real: bool = False) -> np.ndarray:
    """Random trigonometric polynomial of fixed degree (independent of N)."""
    if 2 * degree + 1 > grid.n:
        raise ValueError(f"degree {degree} does not fit on an n={grid.n} grid")
    ks, radii = _mode_table(grid.dim, degree)
    draws = gen.normal(size=(len(ks), 2))
    coeffs = (draws[:, 0] + 1j * draws[:, 1]) / math.sqrt(2.0) * decay**radii
    chat = np.zeros(grid.shape, dtype=complex)
    chat[tuple((ks % grid.n).T)] = coeffs
    vals = np.fft.ifftn(chat) * grid.size
    if real:
        vals = vals.real.copy()
    # unit sup-norm keeps outer functions and products O(1) on every manifold
    return vals / max(np.max(np.abs(vals)), 1e-300)


_OUTER_FUNCS = (
    # f(t), f'(t), f''(t); t may be a complex array
    (lambda t: t**2, lambda t: 2.0 * t, lambda t: 2.0 * np.ones_like(t)),
    (lambda t: t**3, lambda t: 3.0 * t**2, lambda t: 6.0 * t),
    (
        lambda t: np.exp(0.5 * t),
        lambda t: 0.5 * np.exp(0.5 * t),
        lambda t: 0.25 * np.exp(0.5 * t),
    ),
)


def _rule_residual(rule: str, wb: _Workbench, gen: np.random.Generator,
                   degree: int, decay: float) -> float:
    grid = wb.grid
    f = _synth_scalar(grid, gen, degree, decay)
    w = _synth_scalar(grid, gen, degree, decay)

    if rule == "p1":
        lhs = wb.d(f * w)
        rhs = wb.d(f) * w + f * wb.d(w)
        return _sup(lhs - rhs)
    if rule == "p2":
        sigma = np.stack([_synth_scalar(grid, gen, degree, decay) for _ in range(wb.dim)])
        lhs = wb.d_dagger(f * sigma)
        rhs = f * wb.d_dagger(sigma) - wb.pair(wb.d(f), sigma)
        return _sup(lhs - rhs)
    if rule == "p3":
        lhs = wb.d_dagger(f * wb.d(w))
        rhs = f * wb.lap(w) - wb.pair(wb.d(f), wb.d(w))
        return _sup(lhs - rhs)
    if rule == "p4":
        lhs = wb.lap(f * w)
        rhs = f * wb.lap(w) - 2.0 * wb.pair(wb.d(f), wb.d(w)) + w * wb.lap(f)
        return _sup(lhs - rhs)
    if rule == "p5":
        df, dw = wb.d(f), wb.d(w)
        lhs = wb.hess(f * w)
        cross = df[:, None] * dw[None, :] + dw[:, None] * df[None, :]
        rhs = f * wb.hess(w) + cross + w * wb.hess(f)
        return _sup(lhs - rhs)
    if rule == "c1":
        wr = _synth_scalar(grid, gen, degree, decay, real=True)
        f0, f1, _ = _OUTER_FUNCS[gen.integers(len(_OUTER_FUNCS))]
        lhs = wb.d(f0(wr))
        rhs = f1(wr) * wb.d(wr)
        return _sup(lhs - rhs)
    if rule == "c2":
        wr = _synth_scalar(grid, gen, degree, decay, real=True)
        f0, f1, f2 = _OUTER_FUNCS[gen.integers(len(_OUTER_FUNCS))]
        dw = wb.d(wr)
        lhs = wb.lap(f0(wr))
        rhs = -f2(wr) * wb.pair(dw, dw) + f1(wr) * wb.lap(wr)
        return _sup(lhs - rhs)
    if rule == "c3":
        wr = _synth_scalar(grid, gen, degree, decay, real=True)
        f0, f1, f2 = _OUTER_FUNCS[gen.integers(len(_OUTER_FUNCS))]
        dw = wb.d(wr)
        lhs = wb.hess(f0(wr))
        rhs = f2(wr) * dw[:, None] * dw[None, :] + f1(wr) * wb.hess(wr)
        return _sup(lhs - rhs)
    if rule == "lap_hess":
        margin = np.abs(wb.lap(w)) - math.sqrt(wb.dim) * wb.grid.hess_norm(w)
        return float(np.max(margin))

    # bundle rules; fm broadcasts the scalar over section components
    u = np.stack(
        [_synth_scalar(grid, gen, degree, decay) for _ in range(wb.m)], axis=-1
    )
    fm = f[..., None]
    if rule == "p6":
        lhs = wb.nabla(fm * u)
        df = wb.d(f)
        rhs = fm * wb.nabla(u) + df[..., None] * u
        return _sup(lhs - rhs)
    if rule == "p7":
        z = np.stack(
            [_synth_scalar(grid, gen, degree, decay, real=True) for _ in range(wb.dim)]
        )
        zf = np.einsum("d...,d...->...", z, wb.d(f))
        lhs = wb.nabla_dir(z, fm * u)
        rhs = fm * wb.nabla_dir(z, u) + zf[..., None] * u
        return _sup(lhs - rhs)
    if rule == "p8":
        lhs = wb.nabla_dagger(fm * wb.nabla(u))
        grad_f = wb.d(f)  # flat metric: components of (df)#
        rhs = fm * wb.bochner(u) - wb.nabla_dir(grad_f, u)
        return _sup(lhs - rhs)
    if rule == "p9":
        lhs = wb.bochner(fm * u)
        grad_f = wb.d(f)
        rhs = fm * wb.bochner(u) - 2.0 * wb.nabla_dir(grad_f, u) + wb.lap(f)[..., None] * u
        return _sup(lhs - rhs)
    raise ValueError(f"unknown rule {rule!r}; choose from {RULES}")


def verify_rule(
    rule: str,
    manifold,
    trials: int = 100,
    seed: int = 0,
    grid_n: int = 64,
    connection: Connection | None = None,
    degree: int = 20,
    decay: float = 0.38,
) -> float:
    """Max residual of a rule over seeded random trials (sup norm per trial).

    For lap_hess the return value is the max signed margin
    |lap w| - sqrt(n) |Hess w| over all nodes and trials (<= 0 means the
    inequality holds everywhere).
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; choose from {RULES}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    man = make_manifold(manifold) if isinstance(manifold, str) else manifold
    grid = PeriodicGrid(man, grid_n)
    if rule in BUNDLE_RULES:
        if connection is None:
            connection = default_bundle_connection(man)
        if connection.bundle != "trivial" or connection.omega is None:
            raise ValueError(f"rule {rule} needs a trivial bundle with a supplied omega")
    wb = _Workbench(grid, connection if rule in BUNDLE_RULES else None)
    worst = -math.inf
    for trial in range(trials):
        gen = np.random.Generator(np.random.Philox(key=[derived_seed(seed, trial), 11]))
        worst = max(worst, _rule_residual(rule, wb, gen, degree, decay))
    return worst


@dataclass(frozen=True)
class RuleResult:
    rule: str
    manifold: str
    trials: int
    max_residual: float
    passed: bool


def run_rules(
    rules=RULES,
    manifolds=("circle", "torus2"),
    trials: int = 100,
    seed: int = 0,
    grid_n: int = 64,
) -> list[RuleResult]:
    """Run each rule on each applicable manifold; bundle rules run on the
    default rank-2 twisted bundle over the circle."""
    out = []
    for rule in rules:
        targets = [n for n in manifolds if n == "circle"] if rule in BUNDLE_RULES else manifolds
        for name in targets:
            res = verify_rule(rule, name, trials=trials, seed=seed, grid_n=grid_n)
            tol = LAP_HESS_TOL if rule == "lap_hess" else EQUALITY_TOL
            out.append(
                RuleResult(
                    rule=rule,
                    manifold=name,
                    trials=trials,
                    max_residual=res,
                    passed=bool(res <= tol),
                )
            )
    return out


def write_rules_csv(dest, results) -> None:
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        writer = csv.writer(fh)
        writer.writerow(["rule", "manifold", "trials", "max_residual", "pass"])
        for r in results:
            writer.writerow(
                [r.rule, r.manifold, str(r.trials), repr(float(r.max_residual)), str(r.passed)]
            )
    finally:
        if own:
            fh.close()
