#!/usr/bin/env python3
"""One-shot inequality survey for a problem configuration.

Runs every norm-inequality family that applies to the given config and
prints a compact table: the measured worst ratio, the proved constant
when one exists, and the verdict.  Families whose structural hypotheses
fail are reported as SKIPPED with the reason rather than aborting the
whole survey.
"""

from __future__ import annotations

import argparse
import json
import sys

from oulab.fields import ThresholdError, load_problem
from oulab.oracle import FAMILIES, HypothesisError, check_inequality_family


def parse_args(argv=None) -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True, help="problem config (JSON)")
    ap.add_argument("--grid-n", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="also dump full reports here")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    problem = load_problem(args.config)

    reports = {}
    print(f"{'family':16s} {'worst ratio':>12s} {'constant':>10s}  verdict")
    for family in FAMILIES:
        try:
            r = check_inequality_family(
                problem, family, grid_n=args.grid_n, seed=args.seed
            )
        except (HypothesisError, ThresholdError, ValueError) as exc:
            print(f"{family:16s} {'-':>12s} {'-':>10s}  SKIPPED: {exc}")
            continue
        reports[family] = r.to_dict()
        constant = "-" if r.proved_constant is None else f"{r.proved_constant:.4f}"
        verdict = "pass" if r.passed else ("empirical" if r.passed is None else "FAIL")
        print(f"{family:16s} {r.worst_ratio:12.6f} {constant:>10s}  {verdict}")

    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(reports, fh, indent=2, sort_keys=True)
        print(f"full reports written to {args.json}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
