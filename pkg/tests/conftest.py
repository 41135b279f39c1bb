import time

import pytest

SESSION_START = time.perf_counter()


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_collection_modifyitems(session, config, items):
    # the acceptance suite runs last so its wall-time check covers the whole session
    items.sort(key=lambda item: item.nodeid.startswith("tests/test_acceptance.py"))


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def record(number, passed, text):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {text}"
        request.config.acceptance_lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
