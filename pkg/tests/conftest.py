import pytest


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def report_line(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def emit(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}"
        print(line)
        request.config._acceptance_lines.append((number, line))
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
