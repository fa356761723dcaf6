"""Command-line front end: config ingestion, experiment orchestration, reports.

One binary, nine subcommands:

    oulab assumptions    --config problem.json
    oulab thresholds     --config problem.json
    oulab simulate       --config problem.json --t 1 --dt 1e-3 --paths 100
    oulab estimate       --config problem.json --section "cos(theta)" --t 0.5 ...
    oulab oracle-compare --config problem.json --t 0.5 --paths 100000 --dt 0.001
    oulab inequalities   --config problem.json --families coercive,ueps
    oulab ibp            --config problem.json --pairs 20
    oulab calculus       --rules p1,p2 --manifolds circle,torus2
    oulab sc-check       --config problem.json

Exit codes: 0 = success and all asserted checks passed; 2 = a check failed
(reports are still written); 1 = usage or configuration error.

All configuration comes from the config file and flags (no environment
variables).  CSV output is RFC 4180 and never contains timestamps; JSON
reports are pretty-printed with sorted keys and carry a ``generated_at``
field unless --no-timestamp is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import struct
import sys
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import calculus as calculus_mod
from .feynman_kac import estimate_field, estimate_many, write_estimates_csv
from .fields import (
    ConfigError,
    ThresholdError,
    check_assumptions,
    compute_thresholds,
    load_problem,
)
from .oracle import (
    FAMILIES,
    HypothesisError,
    PeriodicGrid,
    Rk4StabilityError,
    build_operator,
    check_ibp,
    check_inequality_family,
    sc_diagnostic,
    semigroup_apply,
)
from .rng import derived_seed
from .stochastics import ENGINES, SCHEMES, SdeConfig, simulate_paths

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract reserves 2 for check
    failures, so route usage errors to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Emission helpers
# ---------------------------------------------------------------------------


def _emit_text(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)


def _emit_json(payload: dict, args) -> None:
    if not getattr(args, "no_timestamp", False):
        payload = dict(payload)
        payload["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    _emit_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _fmt(value) -> str:
    """Shortest round-trip float formatting for CSV cells."""
    return repr(float(value))


def _parse_x0(text: str, problem) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        coords = np.array([float(p) for p in parts], dtype=float)
    except ValueError:
        raise ConfigError("x0 must be a comma-separated list of numbers", field_name="x0")
    if coords.shape != (problem.manifold.dim,):
        raise ConfigError(
            f"x0 needs {problem.manifold.dim} chart coordinate(s) for "
            f"{problem.manifold.name}, got {len(coords)}",
            field_name="x0",
        )
    return coords


def _parse_section_flag(text: str):
    text = text.strip()
    if text.startswith("[") or text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON section spec: {exc}", field_name="section")
    return text


def _default_section(problem) -> str:
    man = problem.manifold
    if not man.angle_vars:
        raise ConfigError(
            "no --section given and the manifold has no default test function",
            field_name="section",
        )
    return f"cos({man.chart_vars[0]})"


def _sde_config(args) -> SdeConfig:
    return SdeConfig(
        dt=args.dt,
        t_final=args.t,
        n_paths=args.paths,
        seed=args.seed,
        scheme=args.scheme,
        engine=args.engine,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_assumptions(args) -> int:
    problem = load_problem(args.config)
    report = check_assumptions(
        problem,
        samples=problem.manifold.sample_chart_coords(args.samples),
        eps=args.eps,
        replace_h_with_zero=args.h_zero,
    )
    payload = {
        "config": args.config,
        "label": problem.label,
        "report": report.to_dict(),
    }
    _emit_json(payload, args)
    return 0 if report.all_passed else 2


def _cmd_thresholds(args) -> int:
    problem = load_problem(args.config)
    constants = problem.constants
    if args.p is not None:
        constants = replace(constants, p=args.p)
    try:
        thresholds = compute_thresholds(constants, problem.manifold.dim)
    except ThresholdError as exc:
        _emit_json({"config": args.config, "error": str(exc)}, args)
        return 2
    _emit_json({"config": args.config, "thresholds": thresholds.to_dict()}, args)
    return 0


def _cmd_simulate(args) -> int:
    problem = load_problem(args.config)
    cfg = _sde_config(args)
    x0 = problem.manifold.from_chart(_parse_x0(args.x0, problem))
    batch = simulate_paths(problem, x0, cfg)

    if args.dump is not None:
        k_count = batch.positions.shape[1]
        with open(args.dump, "wb") as fh:
            for i in range(batch.n_paths):
                fh.write(struct.pack("<Q", k_count))
                fh.write(np.ascontiguousarray(batch.positions[i], dtype="<f8").tobytes())

    ambient = problem.manifold.ambient_dim
    header = ["path", "alive", "exit_step"] + [f"y{j}" for j in range(ambient)]
    rows = []
    for i in range(batch.n_paths):
        rows.append(
            [str(i), str(bool(batch.alive[i])), str(int(batch.exit_step[i]))]
            + [_fmt(v) for v in batch.positions[i, -1]]
        )
    _emit_text(_csv_text(header, rows), args.out)
    return 0


def _cmd_estimate(args) -> int:
    problem = load_problem(args.config)
    cfg = _sde_config(args)
    sections = [_parse_section_flag(s) for s in (args.section or [_default_section(problem)])]
    x0 = _parse_x0(args.x0, problem)
    estimates = estimate_many(
        problem, sections, x0, cfg, force=args.force, workers=args.workers
    )
    if args.format == "csv":
        buf = io.StringIO()
        write_estimates_csv(buf, problem, estimates)
        _emit_text(buf.getvalue(), args.out)
    else:
        payload = {
            "config": args.config,
            "t": cfg.t_final,
            "x": [float(v) for v in x0],
            "estimates": [
                {
                    "section": str(raw),
                    "value_re": [float(v.real) for v in est.value],
                    "value_im": [float(v.imag) for v in est.value],
                    "stderr": [float(s) for s in est.stderr],
                    "n_paths": est.n_paths,
                    "n_excluded": est.n_excluded,
                    "seed": est.seed,
                    "waiver": est.waiver,
                }
                for raw, est in zip(sections, estimates)
            ],
        }
        _emit_json(payload, args)
    return 0


def _grid_points(grid: PeriodicGrid, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Evenly strided probe points; returns (chart coords, flat indices)."""
    n = grid.n
    count = min(count, n)
    stride = max(n // count, 1)
    idx = np.arange(0, count * stride, stride)[:count]
    if grid.dim == 1:
        coords = grid.coords[idx]
        flat = idx
    else:
        coords = grid.coords[idx, idx]
        flat = idx * n + idx  # C-order raveling of the (i, i) diagonal
    return coords, flat


def _cmd_oracle_compare(args) -> int:
    problem = load_problem(args.config)
    if problem.m != 1:
        raise ConfigError(
            "the grid oracle covers scalar problems; higher-rank bundles are "
            "validated against closed-form oracles instead",
            field_name="connection.m",
            config_path=args.config,
        )
    cfg = _sde_config(args)
    section_raw = args.section or _default_section(problem)
    section = _parse_section_flag(section_raw)

    grid = PeriodicGrid(problem.manifold, args.oracle_n)
    op = build_operator(problem, grid)
    from .fields import parse_section

    sec = parse_section(problem.manifold, section, problem.m)
    fvals = sec.values(grid.coords.reshape(-1, grid.dim))[..., 0].reshape(grid.shape)
    oracle_vals = semigroup_apply(op, fvals, cfg.t_final, backend=args.oracle_backend)

    coords, flat = _grid_points(grid, args.points)
    estimates = estimate_field(
        problem, section, coords, cfg, force=args.force, workers=args.workers
    )
    oracle_flat = oracle_vals.reshape(-1)

    header = list(problem.manifold.chart_vars) + [
        "re_mc",
        "im_mc",
        "stderr",
        "re_oracle",
        "im_oracle",
        "abs_diff",
        "tolerance",
        "pass",
    ]
    rows = []
    all_pass = True
    for est, pos in zip(estimates, flat):
        mc = est.scalar_value
        se = float(est.stderr[0])
        ov = complex(oracle_flat[pos])
        diff = abs(mc - ov)
        tol = max(3.0 * se, args.tol_rel * abs(ov))
        ok = diff <= tol
        all_pass &= ok
        rows.append(
            [_fmt(c) for c in est.x]
            + [
                _fmt(mc.real),
                _fmt(mc.imag),
                _fmt(se),
                _fmt(ov.real),
                _fmt(ov.imag),
                _fmt(diff),
                _fmt(tol),
                str(ok),
            ]
        )

    if args.format == "csv":
        _emit_text(_csv_text(header, rows), args.out)
    else:
        payload = {
            "config": args.config,
            "section": str(section_raw),
            "t": cfg.t_final,
            "oracle_n": args.oracle_n,
            "tol_rel": args.tol_rel,
            "all_passed": bool(all_pass),
            "points": [dict(zip(header, row)) for row in rows],
        }
        _emit_json(payload, args)
    return 0 if all_pass else 2


def _cmd_inequalities(args) -> int:
    problem = load_problem(args.config)
    families = args.families.split(",") if args.families else list(FAMILIES)
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError(
                f"unknown family {fam!r} (known: {', '.join(FAMILIES)})",
                field_name="families",
            )
    reports = []
    for fam in families:
        reports.append(
            check_inequality_family(
                problem,
                fam,
                grid_n=args.grid_n,
                lam=args.lam,
                p=args.p,
                seed=args.seed,
                force=args.force,
                sweep=not args.no_sweep,
            )
        )

    def _ok(r):
        # families without a proved constant pass when the empirical one is finite
        if r.passed is not None:
            return r.passed
        return bool(np.isfinite(r.empirical_constant))

    all_pass = all(_ok(r) for r in reports)

    if args.format == "csv":
        header = ["family", "p", "lambda", "proved_constant", "empirical_constant",
                  "worst_ratio", "pass"]
        rows = [
            [
                r.family,
                _fmt(r.p),
                _fmt(r.lam) if r.lam is not None else "",
                _fmt(r.proved_constant) if r.proved_constant is not None else "",
                _fmt(r.empirical_constant),
                _fmt(r.worst_ratio),
                str(_ok(r)),
            ]
            for r in reports
        ]
        _emit_text(_csv_text(header, rows), args.out)
    else:
        payload = {
            "config": args.config,
            "all_passed": bool(all_pass),
            "reports": [r.to_dict() for r in reports],
        }
        _emit_json(payload, args)
    return 0 if all_pass else 2


def _cmd_ibp(args) -> int:
    problem = load_problem(args.config)
    grid = PeriodicGrid(problem.manifold, args.grid_n)
    degree = min(20, args.grid_n // 4)
    rows = []
    worst = 0.0
    for k in range(args.pairs):
        gen = np.random.Generator(np.random.Philox(key=[derived_seed(args.seed, k), 23]))
        u = calculus_mod._synth_scalar(grid, gen, degree, 0.5)
        w = calculus_mod._synth_scalar(grid, gen, degree, 0.5)
        r1, r2 = check_ibp(problem, grid, u, w, p=args.p)
        worst = max(worst, r1, r2)
        ok = max(r1, r2) <= args.tol
        rows.append([str(k), _fmt(r1), _fmt(r2), str(ok)])
    header = ["pair", "residual_first_identity", "residual_second_identity", "pass"]
    _emit_text(_csv_text(header, rows), args.out)
    return 0 if worst <= args.tol else 2


def _cmd_calculus(args) -> int:
    rules = args.rules.split(",") if args.rules else list(calculus_mod.RULES)
    for rule in rules:
        if rule not in calculus_mod.RULES:
            raise ConfigError(
                f"unknown rule {rule!r} (known: {', '.join(calculus_mod.RULES)})",
                field_name="rules",
            )
    manifolds = args.manifolds.split(",") if args.manifolds else ["circle", "torus2"]
    results = calculus_mod.run_rules(
        rules=rules,
        manifolds=manifolds,
        trials=args.trials,
        seed=args.seed,
        grid_n=args.grid_n,
    )
    buf = io.StringIO()
    calculus_mod.write_rules_csv(buf, results)
    _emit_text(buf.getvalue(), args.out)
    return 0 if all(r.passed for r in results) else 2


def _cmd_sc_check(args) -> int:
    problem = load_problem(args.config)
    bound = sc_diagnostic(problem, seed=args.seed)
    passed = True if args.min_bound is None else bound >= args.min_bound
    payload = {
        "config": args.config,
        "curvature_drift_lower_bound": bound,
        "min_bound": args.min_bound,
        "passed": bool(passed),
    }
    _emit_json(payload, args)
    return 0 if passed else 2


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def _add_common(sp, *, config=True):
    if config:
        sp.add_argument("--config", required=True, help="problem config (JSON)")
    sp.add_argument("--out", default=None, help="output path (default: stdout)")
    sp.add_argument("--seed", type=int, default=0, help="base RNG seed")
    sp.add_argument(
        "--no-timestamp",
        action="store_true",
        help="omit the generated_at field from JSON output",
    )


def _add_sde(sp):
    sp.add_argument("--t", type=float, required=True, help="evolution time")
    sp.add_argument("--dt", type=float, required=True, help="time step")
    sp.add_argument("--paths", type=int, required=True, help="number of sample paths")
    sp.add_argument("--scheme", choices=SCHEMES, default="heun_stratonovich")
    sp.add_argument("--engine", choices=ENGINES, default="auto")
    sp.add_argument("--x0", default="0", help="chart coordinates, comma-separated")
    sp.add_argument("--force", action="store_true",
                    help="proceed despite failed probabilistic preconditions")


def build_parser() -> _Parser:
    parser = _Parser(prog="oulab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("assumptions", help="sampled structural-condition margins")
    _add_common(sp)
    sp.add_argument("--samples", type=int, default=10000)
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--h-zero", action="store_true",
                    help="evaluate the h-free variant of the conditions")
    sp.set_defaults(func=_cmd_assumptions)

    sp = sub.add_parser("thresholds", help="admissible eps and spectral shift levels")
    _add_common(sp)
    sp.add_argument("--p", type=float, default=None, help="override the exponent p")
    sp.set_defaults(func=_cmd_thresholds)

    sp = sub.add_parser("simulate", help="store sample paths; CSV summary")
    _add_common(sp)
    _add_sde(sp)
    sp.add_argument("--dump", default=None,
                    help="binary path dump: per path a uint64 point count, "
                         "then count*ambient_dim little-endian float64")
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("estimate", help="Monte Carlo semigroup value at a point")
    _add_common(sp)
    _add_sde(sp)
    sp.add_argument("--section", action="append", default=None,
                    help="initial section (expression or JSON; repeatable)")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=_cmd_estimate)

    sp = sub.add_parser("oracle-compare",
                        help="Monte Carlo vs spectral grid oracle at probe points")
    _add_common(sp)
    _add_sde(sp)
    sp.add_argument("--section", default=None, help="initial section expression")
    sp.add_argument("--points", type=int, default=8)
    sp.add_argument("--oracle-n", type=int, default=128)
    sp.add_argument("--oracle-backend", choices=("expm", "rk4", "both"), default="both")
    sp.add_argument("--tol-rel", type=float, default=0.02)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=_cmd_oracle_compare)

    sp = sub.add_parser("inequalities", help="norm-inequality families over a suite")
    _add_common(sp)
    sp.add_argument("--families", default=None,
                    help=f"comma-separated subset of: {', '.join(FAMILIES)}")
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--grid-n", type=int, default=128)
    sp.add_argument("--no-sweep", action="store_true")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--format", choices=("csv", "json"), default="json")
    sp.set_defaults(func=_cmd_inequalities)

    sp = sub.add_parser("ibp", help="integration-by-parts residuals on random pairs")
    _add_common(sp)
    sp.add_argument("--pairs", type=int, default=20)
    sp.add_argument("--grid-n", type=int, default=64)
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.set_defaults(func=_cmd_ibp)

    sp = sub.add_parser("calculus", help="product/chain-rule residual battery")
    _add_common(sp, config=False)
    sp.add_argument("--rules", default=None,
                    help=f"comma-separated subset of: {', '.join(calculus_mod.RULES)}")
    sp.add_argument("--manifolds", default=None, help="comma-separated (circle,torus2)")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--grid-n", type=int, default=64)
    sp.set_defaults(func=_cmd_calculus)

    sp = sub.add_parser("sc-check", help="curvature-plus-drift lower-bound diagnostic")
    _add_common(sp)
    sp.add_argument("--min-bound", type=float, default=None,
                    help="fail (exit 2) when the sampled bound is below this")
    sp.set_defaults(func=_cmd_sc_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"oulab {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except (HypothesisError, ThresholdError) as exc:
        print(f"oulab {args.command}: {exc}", file=sys.stderr)
        return 1
    except Rk4StabilityError as exc:
        print(f"oulab {args.command}: oracle failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError) as exc:
        print(f"oulab {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
