import pytest

# (criterion, passed, detail) rows gathered by the acceptance tests
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def report(criterion: str, passed: bool, detail: str) -> bool:
    line = (criterion, bool(passed), detail)
    ACCEPTANCE_LINES.append(line)
    print(f"[acceptance {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")
    return bool(passed)


@pytest.fixture
def acceptance_report():
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} | {detail}")
