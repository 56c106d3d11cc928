import pytest

from gradobf.model import reference_model

# one line per acceptance criterion, printed again at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def reference():
    return reference_model()


@pytest.fixture
def verdict():
    """Record and print a criterion's pass/fail line, then return the flag."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
