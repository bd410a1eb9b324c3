import pytest


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        verdict, detail = lines[n]
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {detail}")
