from __future__ import annotations

import contextlib
import warnings

import pytest

_RESULTS: list[str] = []


@contextlib.contextmanager
def _criterion(number: int, title: str):
    """Record a PASS/FAIL line for an acceptance criterion and re-raise failures."""
    details: list[str] = []
    try:
        yield details
    except BaseException as exc:
        _RESULTS.append(f"FAIL criterion {number}: {title} | {'; '.join(details)} | {type(exc).__name__}: {exc}")
        raise
    _RESULTS.append(f"PASS criterion {number}: {title} | {'; '.join(details)}")


@pytest.fixture
def criterion():
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _runtime_warnings_are_errors():
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        yield
