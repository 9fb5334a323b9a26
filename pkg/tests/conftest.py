import pytest

ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def _record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
