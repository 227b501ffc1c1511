import numpy as np
import pytest

_CRITERIA: dict[int, tuple[str, str, str]] = {}


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(self, number: int, title: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (title, "PASS" if passed else "FAIL", detail)
        return passed

    def skip(self, number: int, title: str, reason: str):
        _CRITERIA[number] = (title, "SKIP", reason)
        pytest.skip(reason)


@pytest.fixture
def criterion():
    return CriterionLog()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status:4s} {title}: {detail}")
