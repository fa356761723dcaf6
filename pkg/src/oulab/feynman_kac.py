"""Monte Carlo estimation of e^{-tH} f via the path representation.

For the operator ``H u = laplacian(u) + grad(phi).u - X u + V u`` (with
connection Laplacian on bundle sections), the semigroup acting on a
section f is estimated by

    (e^{-tH} f)(x)  ~  mean over paths of  V_K . T_K^{-1} . f(Y_K)

where Y is the diffusion with generator ``-laplacian + (X - grad phi)``
started at x, T_K the parallel transport along Y, and V_K the
path-ordered potential factor.  Estimates carry componentwise standard
errors and are deterministic for a given (seed, n_paths) regardless of
chunking or worker count: samples are computed per path, assembled by
path index, and reduced once in a fixed order.

Start points are given in chart coordinates; estimates record them as
given.  Requires pointwise nonnegative V (else the potential factor is
not a contraction and the estimator variance is uncontrolled); pass
``force=True`` to proceed anyway, which records a waiver on the result.
"""

from __future__ import annotations

import csv
import io
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .fields import (
    AssumptionReport,
    Problem,
    Section,
    check_assumptions,
    parse_section,
)
from .rng import derived_seed
from .stochastics import SdeConfig, endpoint_state

__all__ = [
    "SemigroupEstimate",
    "fk_precheck",
    "estimate_semigroup",
    "estimate_many",
    "estimate_field",
    "write_estimates_csv",
]


@dataclass(frozen=True)
class SemigroupEstimate:
    """One Monte Carlo evaluation of (e^{-tH} f)(x).

    value/stderr are per fiber component (m of them); ``n_paths`` counts
    the paths that contributed (blown-up paths are excluded and counted
    in ``n_excluded``).  ``x`` is the start point in chart coordinates.
    """

    value: np.ndarray
    stderr: np.ndarray
    n_paths: int
    n_excluded: int
    t: float
    x: tuple[float, ...]
    seed: int
    waiver: str | None = None

    @property
    def scalar_value(self) -> complex:
        if self.value.shape != (1,):
            raise ValueError("estimate is not scalar-valued")
        return complex(self.value[0])


def fk_precheck(
    problem: Problem, force: bool = False
) -> tuple[AssumptionReport, str | None]:
    """Validate the estimator's preconditions.

    Nonnegativity of V is required (hard error unless ``force``); the
    structural assumptions are evaluated with h replaced by zero and
    returned for reporting, but do not block estimation.
    """
    waiver = None
    if not problem.potential.nonneg:
        msg = (
            "V is not pointwise nonnegative; the path estimator is only "
            "guaranteed for V >= 0"
        )
        if not force:
            raise ValueError(msg + " (pass force=True to override)")
        waiver = msg + " (forced)"
    report = check_assumptions(problem, replace_h_with_zero=True)
    return report, waiver


def _section_list(problem: Problem, sections) -> list[Section]:
    out = []
    for s in sections:
        if isinstance(s, Section):
            out.append(s)
        else:
            out.append(parse_section(problem.manifold, s, problem.m))
    return out


def _chunk_samples(problem: Problem, sections, x0_amb, cfg: SdeConfig, lo: int, hi: int):
    """Per-path estimator samples for paths [lo, hi).

    Returns (lo, [per-section (hi-lo, m) complex arrays], alive).
    """
    conn = problem.connection
    track_winding = False
    state = endpoint_state(problem, x0_amb, cfg, lo, hi, track_winding=track_winding)
    man = problem.manifold
    c_k = man.to_chart(state.y)

    weight = None
    if state.vsum is not None:
        weight = np.exp(-state.vsum)
    if state.csum is not None:
        phase = np.exp(state.csum)  # T_K^{-1} for a rank-1 twist
        weight = phase if weight is None else weight * phase

    if conn.bundle == "tangent":
        jac = man.chart_jacobian(c_k)
        frame0 = man.frame(np.asarray(x0_amb, dtype=float))
        x0c = man.to_chart(np.asarray(x0_amb, dtype=float))
        to_chart_mat = (
            man.inverse_metric(x0c) @ man.chart_jacobian(x0c).T @ frame0
        )  # coefficients in the start frame -> chart components at x0
    else:
        jac = frame0 = to_chart_mat = None

    out = []
    for section in sections:
        f = section.values(c_k)  # (B, m) complex
        if conn.bundle == "tangent":
            f_amb = np.einsum("...ai,...i->...a", jac, f.astype(complex))
            coeffs = np.einsum("...ln,...l->...n", state.frame_k, f_amb)
            samples = coeffs @ to_chart_mat.T.astype(complex)
            if weight is not None:
                samples = weight[:, None] * samples
        elif state.vmat is not None:
            t_inv = (
                np.conj(np.swapaxes(state.tmat, -1, -2))
                if state.tmat is not None
                else None
            )
            g = f if t_inv is None else np.einsum("...ab,...b->...a", t_inv, f)
            samples = np.einsum("...ab,...b->...a", state.vmat, g)
        else:
            samples = f if weight is None else weight[:, None] * f
            if state.tmat is not None:
                t_inv = np.conj(np.swapaxes(state.tmat, -1, -2))
                samples = np.einsum("...ab,...b->...a", t_inv, samples)
        out.append(samples)
    return lo, out, state.alive


def _chunk_samples_job(args):
    return _chunk_samples(*args)


def estimate_many(
    problem: Problem,
    sections,
    x,
    cfg: SdeConfig,
    *,
    force: bool = False,
    workers: int = 1,
) -> list[SemigroupEstimate]:
    """Estimates for several sections sharing one path ensemble."""
    _, waiver = fk_precheck(problem, force=force)
    sections = _section_list(problem, sections)
    man = problem.manifold
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (man.dim,):
        raise ValueError(
            f"x must have {man.dim} chart coordinate(s) for {man.name}, got shape {x.shape}"
        )
    x0_amb = man.from_chart(x)
    m = problem.m
    n = cfg.n_paths

    if cfg.n_steps == 0:
        return [
            SemigroupEstimate(
                value=np.atleast_1d(s.values(x[None, :])[0]).astype(complex),
                stderr=np.zeros(m),
                n_paths=n,
                n_excluded=0,
                t=cfg.t_final,
                x=tuple(float(v) for v in x),
                seed=cfg.seed,
                waiver=waiver,
            )
            for s in sections
        ]

    samples = [np.empty((n, m), dtype=complex) for _ in sections]
    alive = np.empty(n, dtype=bool)

    if workers <= 1:
        lo, chunk, al = _chunk_samples(problem, sections, x0_amb, cfg, 0, n)
        for dst, src in zip(samples, chunk):
            dst[:] = src
        alive[:] = al
    else:
        step = -(-n // workers)
        jobs = [
            (problem, sections, x0_amb, cfg, lo, min(lo + step, n))
            for lo in range(0, n, step)
        ]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for lo, chunk, al in pool.map(_chunk_samples_job, jobs):
                hi = lo + al.shape[0]
                for dst, src in zip(samples, chunk):
                    dst[lo:hi] = src
                alive[lo:hi] = al

    n_alive = int(np.count_nonzero(alive))
    if n_alive == 0:
        raise FloatingPointError("all paths exited the blow-up radius")
    out = []
    for samp in samples:
        vals = samp[alive]
        value = vals.mean(axis=0)
        if n_alive > 1:
            var = np.sum(np.abs(vals - value) ** 2, axis=0) / (n_alive - 1)
            stderr = np.sqrt(var / n_alive)
        else:
            stderr = np.full(m, np.inf)
        out.append(
            SemigroupEstimate(
                value=value,
                stderr=stderr,
                n_paths=n_alive,
                n_excluded=n - n_alive,
                t=cfg.t_final,
                x=tuple(float(v) for v in x),
                seed=cfg.seed,
                waiver=waiver,
            )
        )
    return out


def estimate_semigroup(
    problem: Problem,
    section,
    x,
    cfg: SdeConfig,
    *,
    force: bool = False,
    workers: int = 1,
) -> SemigroupEstimate:
    """Estimate (e^{-tH} f)(x) at chart point x."""
    return estimate_many(problem, [section], x, cfg, force=force, workers=workers)[0]


def estimate_field(
    problem: Problem,
    section,
    xs,
    cfg: SdeConfig,
    *,
    force: bool = False,
    workers: int = 1,
) -> list[SemigroupEstimate]:
    """Estimate (e^{-tH} f) at several chart points.

    Point j uses an independent stream seeded ``derived_seed(cfg.seed, j)``
    so adding points never perturbs earlier ones.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    out = []
    for j, row in enumerate(xs):
        cfg_j = replace(cfg, seed=derived_seed(cfg.seed, j))
        out.append(
            estimate_semigroup(problem, section, row, cfg_j, force=force, workers=workers)
        )
    return out


def write_estimates_csv(dest, problem: Problem, estimates) -> None:
    """Write estimates as RFC-4180 CSV (no timestamps).

    Columns: chart coordinates, then re/im/stderr per fiber component,
    then n_paths and t.  Floats are written with shortest round-trip
    representation.
    """
    man = problem.manifold
    m = problem.m
    header = list(man.chart_vars)
    for i in range(m):
        header += [f"re_value_{i}", f"im_value_{i}", f"stderr_{i}"]
    header += ["n_paths", "t"]

    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        writer = csv.writer(fh)
        writer.writerow(header)
        for est in estimates:
            row = [repr(float(v)) for v in est.x]
            for i in range(m):
                row += [
                    repr(float(est.value[i].real)),
                    repr(float(est.value[i].imag)),
                    repr(float(est.stderr[i])),
                ]
            row += [str(est.n_paths), repr(float(est.t))]
            writer.writerow(row)
    finally:
        if own:
            fh.close()


def estimates_csv_text(problem: Problem, estimates) -> str:
    """The CSV document as a string (used for byte-identity checks)."""
    buf = io.StringIO(newline="")
    write_estimates_csv(buf, problem, estimates)
    return buf.getvalue()
