import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(criterion, ok, detail)``.

    ``ok=None`` marks an informational line.
    """

    def record(criterion: str, ok, detail: str):
        status = "INFO" if ok is None else "PASS" if ok else "FAIL"
        _VERDICTS.append(f"{status}  {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
