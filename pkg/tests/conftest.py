import pytest

# (number, title, passed, detail) rows filled in by the acceptance module
VERDICTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it so a miss also fails the test."""
    def record(number, title, passed, detail=""):
        VERDICTS.append((number, title, bool(passed), detail))
        print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}")
        assert passed, f"criterion {number} ({title}) not met: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{number:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}")
