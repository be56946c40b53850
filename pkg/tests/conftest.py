"""Shared pytest hooks: acceptance criteria report one summary line each."""

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store the outcome of an acceptance check and echo it immediately."""
    line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
