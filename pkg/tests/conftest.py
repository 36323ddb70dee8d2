"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion at the end of the run."""

from contextlib import contextmanager
from dataclasses import dataclass

import pytest

RESULTS: dict[int, "Outcome"] = {}


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool = False
    detail: str = ""


@contextmanager
def _criterion(number: int, title: str):
    outcome = Outcome(number, title)
    try:
        yield outcome
    except BaseException as exc:
        outcome.passed = False
        if not outcome.detail:
            outcome.detail = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        RESULTS[number] = outcome
        raise
    outcome.passed = True
    RESULTS[number] = outcome


@pytest.fixture
def criterion():
    """``with criterion(3, "title") as c: ...``; set ``c.detail`` to report measured values."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        r = RESULTS[n]
        line = f"criterion {n:2d} {'PASS' if r.passed else 'FAIL'}: {r.title}"
        terminalreporter.write_line(line + (f" ({r.detail})" if r.detail else ""))
