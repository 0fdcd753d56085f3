import pytest

# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    def record(number: int, passed: bool, detail: str, seconds: float, limit: float):
        status = "PASS" if passed and seconds < limit else "FAIL"
        line = f"criterion {number}: {status} {detail} ({seconds:.2f}s, limit {limit:g}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record
