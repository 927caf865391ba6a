import pytest


class AcceptanceLog:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def __init__(self):
        self.lines = []

    def __call__(self, criterion, passed: bool, detail: str = "") -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        self.lines.append(line)
        print(line)
        return passed


def pytest_configure(config):
    config.acceptance_log = AcceptanceLog()


@pytest.fixture
def record(request):
    return request.config.acceptance_log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_log.lines
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
