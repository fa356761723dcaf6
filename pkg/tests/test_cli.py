"""Command-line interface: exit codes, output formats, reproducibility."""

from __future__ import annotations

import json
import math
import struct

import numpy as np
import pytest

from oulab.cli import main
from oulab.fields import compute_thresholds

from conftest import CONFIG_DIR

CIRCLE_HEAT = str(CONFIG_DIR / "circle_heat.json")
CIRCLE_FULL = str(CONFIG_DIR / "circle_full.json")
CIRCLE_COERCIVE = str(CONFIG_DIR / "circle_coercive.json")


class TestExitCodes:
    def test_usage_error_is_exit_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["estimate", "--config", CIRCLE_HEAT])  # missing --t/--dt/--paths
        assert exc.value.code == 1

    def test_unknown_subcommand_is_exit_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_missing_config_file_is_exit_one(self, capsys):
        code = main(["thresholds", "--config", "/nonexistent/conf.json"])
        assert code == 1
        assert "config error" in capsys.readouterr().err

    def test_invalid_config_field_is_exit_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"manifold": "circle", "V": "0", "phi": "log(theta)"}))
        code = main(["thresholds", "--config", str(bad)])
        assert code == 1
        assert "phi" in capsys.readouterr().err

    def test_failed_check_is_exit_two(self, tmp_path):
        src = json.loads((CONFIG_DIR / "circle_full.json").read_text())
        src["constants"]["beta1"] = 0.0  # breaks the drift-divergence margin
        cfg = tmp_path / "failing.json"
        cfg.write_text(json.dumps(src))
        out = tmp_path / "report.json"
        code = main(["assumptions", "--config", str(cfg), "--out", str(out)])
        assert code == 2
        report = json.loads(out.read_text())["report"]
        assert report["all_passed"] is False


class TestThresholds:
    def test_json_matches_library_values(self, tmp_path, circle_coercive):
        out = tmp_path / "thresholds.json"
        code = main(
            ["thresholds", "--config", CIRCLE_COERCIVE, "--out", str(out), "--no-timestamp"]
        )
        assert code == 0
        payload = json.loads(out.read_text())
        want = compute_thresholds(
            circle_coercive.constants, circle_coercive.manifold.dim
        ).to_dict()
        for key, val in want.items():
            assert payload["thresholds"][key] == pytest.approx(val, rel=1e-15)
        assert "generated_at" not in payload

    def test_timestamp_present_by_default(self, tmp_path):
        out = tmp_path / "thresholds.json"
        main(["thresholds", "--config", CIRCLE_COERCIVE, "--out", str(out)])
        assert "generated_at" in json.loads(out.read_text())

    def test_no_timestamp_output_is_reproducible(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        argv = ["thresholds", "--config", CIRCLE_COERCIVE, "--no-timestamp"]
        main(argv + ["--out", str(a)])
        main(argv + ["--out", str(b)])
        assert a.read_bytes() == b.read_bytes()


class TestAssumptions:
    def test_passing_config(self, tmp_path):
        out = tmp_path / "assumptions.json"
        code = main(
            ["assumptions", "--config", CIRCLE_FULL, "--samples", "2000", "--out", str(out)]
        )
        assert code == 0
        report = json.loads(out.read_text())["report"]
        assert report["all_passed"] is True
        names = {c["condition"] for c in report["checks"]}
        assert {"A2", "A3", "A4", "A5", "A6"} <= names


class TestSimulate:
    def test_csv_and_binary_dump(self, tmp_path):
        out = tmp_path / "paths.csv"
        dump = tmp_path / "paths.bin"
        code = main(
            [
                "simulate", "--config", CIRCLE_HEAT,
                "--t", "0.01", "--dt", "0.001", "--paths", "3",
                "--x0", "0.0", "--out", str(out), "--dump", str(dump),
            ]
        )
        assert code == 0
        lines = out.read_bytes().decode().split("\r\n")
        assert lines[0] == "path,alive,exit_step,y0,y1"
        assert len([ln for ln in lines if ln]) == 4

        blob = dump.read_bytes()
        offset = 0
        for _ in range(3):
            (count,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            assert count == 11  # 10 steps plus the initial point
            pts = np.frombuffer(blob, dtype="<f8", count=count * 2, offset=offset)
            offset += count * 2 * 8
            radii = np.hypot(pts[0::2], pts[1::2])
            np.testing.assert_allclose(radii, 1.0, atol=1e-12)
        assert offset == len(blob)


class TestEstimate:
    def test_csv_reproducible_and_crlf(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = [
            "estimate", "--config", CIRCLE_HEAT,
            "--t", "0.05", "--dt", "0.01", "--paths", "500",
            "--section", "cos(theta)", "--x0", "0.3", "--seed", "11",
        ]
        assert main(argv + ["--out", str(a)]) == 0
        assert main(argv + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert b"\r\n" in a.read_bytes()

    def test_json_payload(self, tmp_path):
        out = tmp_path / "est.json"
        code = main(
            [
                "estimate", "--config", CIRCLE_HEAT,
                "--t", "0.05", "--dt", "0.01", "--paths", "500",
                "--format", "json", "--no-timestamp", "--out", str(out),
            ]
        )
        assert code == 0
        payload = json.loads(out.read_text())
        est = payload["estimates"][0]
        assert est["section"] == "cos(theta)"  # default section on the circle
        assert est["n_paths"] == 500
        assert len(est["value_re"]) == 1

    def test_bad_x0_dimension(self, capsys):
        code = main(
            [
                "estimate", "--config", CIRCLE_HEAT,
                "--t", "0.05", "--dt", "0.01", "--paths", "10",
                "--x0", "0.1,0.2",
            ]
        )
        assert code == 1
        assert "x0" in capsys.readouterr().err


class TestOracleCompare:
    def test_heat_agreement(self, tmp_path):
        out = tmp_path / "compare.csv"
        code = main(
            [
                "oracle-compare", "--config", CIRCLE_HEAT,
                "--t", "0.2", "--dt", "0.005", "--paths", "4000",
                "--points", "4", "--oracle-n", "64", "--tol-rel", "0.05",
                "--out", str(out),
            ]
        )
        assert code == 0
        lines = out.read_bytes().decode().split("\r\n")
        header = lines[0].split(",")
        for col in ("theta", "re_mc", "re_oracle", "stderr", "abs_diff", "tolerance", "pass"):
            assert col in header
        assert len([ln for ln in lines if ln]) == 5


class TestInequalities:
    def test_cz_csv(self, tmp_path):
        out = tmp_path / "ineq.csv"
        code = main(
            [
                "inequalities", "--config", CIRCLE_FULL,
                "--families", "cz", "--grid-n", "64",
                "--format", "csv", "--out", str(out),
            ]
        )
        assert code == 0
        lines = out.read_bytes().decode().split("\r\n")
        assert lines[0] == "family,p,lambda,proved_constant,empirical_constant,worst_ratio,pass"
        row = lines[1].split(",")
        assert row[0] == "cz"
        assert float(row[5]) == pytest.approx(1.0, abs=1e-9)

    def test_gate_failure_maps_to_exit_one(self, tmp_path, capsys):
        src = json.loads((CONFIG_DIR / "circle_full.json").read_text())
        src["constants"]["beta1"] = 0.0
        cfg = tmp_path / "failing.json"
        cfg.write_text(json.dumps(src))
        code = main(
            ["inequalities", "--config", str(cfg), "--families", "coercive", "--grid-n", "64"]
        )
        assert code == 1
        assert "force" in capsys.readouterr().err


class TestIbp:
    def test_residuals_pass(self, tmp_path):
        out = tmp_path / "ibp.csv"
        code = main(
            [
                "ibp", "--config", CIRCLE_FULL,
                "--pairs", "5", "--grid-n", "32", "--out", str(out),
            ]
        )
        assert code == 0
        lines = out.read_bytes().decode().split("\r\n")
        assert lines[0] == "pair,residual_first_identity,residual_second_identity,pass"
        worst = max(
            float(v)
            for ln in lines[1:6]
            for v in ln.split(",")[1:3]
        )
        assert worst <= 1e-8


class TestCalculus:
    def test_quick_battery(self, tmp_path):
        # rules need only manifold names, so there is no --config here
        out = tmp_path / "rules.csv"
        code = main(
            [
                "calculus", "--rules", "p1,lap_hess", "--manifolds", "circle",
                "--trials", "2", "--out", str(out),
            ]
        )
        assert code == 0
        lines = out.read_bytes().decode().split("\r\n")
        assert lines[0] == "rule,manifold,trials,max_residual,pass"
        assert lines[1].startswith("p1,circle,2,")


class TestScCheck:
    def test_reports_lower_bound(self, tmp_path):
        out = tmp_path / "sc.json"
        code = main(
            ["sc-check", "--config", CIRCLE_FULL, "--out", str(out), "--no-timestamp"]
        )
        assert code == 0
        got = json.loads(out.read_text())
        assert got["curvature_drift_lower_bound"] == pytest.approx(-1.0, abs=1e-9)

    def test_min_bound_gate(self, tmp_path):
        out = tmp_path / "sc.json"
        code = main(
            [
                "sc-check", "--config", CIRCLE_FULL,
                "--min-bound", "0.0", "--out", str(out),
            ]
        )
        assert code == 2
        assert math.isfinite(json.loads(out.read_text())["curvature_drift_lower_bound"])
