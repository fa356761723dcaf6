"""Shared fixtures and the acceptance-criteria terminal summary."""

from __future__ import annotations

from pathlib import Path

import pytest

from oulab.fields import load_problem

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

# criterion number -> (description, passed, detail)
_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, description: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE[number] = (description, passed, detail)


@pytest.fixture(scope="session")
def acceptance():
    return record_criterion


def _problem_fixture(name):
    @pytest.fixture(scope="session", name=name)
    def fix():
        return load_problem(str(CONFIG_DIR / f"{name}.json"))

    return fix


circle_heat = _problem_fixture("circle_heat")
ou_line = _problem_fixture("ou_line")
circle_full = _problem_fixture("circle_full")
circle_coercive = _problem_fixture("circle_coercive")
separation_circle = _problem_fixture("separation_circle")
twisted_u1 = _problem_fixture("twisted_u1")
torus_full = _problem_fixture("torus_full")


@pytest.fixture(scope="session")
def config_dir() -> Path:
    return CONFIG_DIR


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        description, passed, detail = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} {status}  {description}"
        if detail:
            line += f"  [{detail}]"
        tr.write_line(line, green=passed, red=not passed)
