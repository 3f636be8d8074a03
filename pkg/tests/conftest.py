"""Shared pytest wiring for the acceptance gate.

Acceptance tests record a verdict through the `acceptance` fixture; after
the run the terminal summary prints one `criterion N: PASS/FAIL` line per
recorded criterion so the gate can be read at a glance.
"""

import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Returns a recorder: acceptance(number, passed, detail)."""
    def record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict} - {detail}")
