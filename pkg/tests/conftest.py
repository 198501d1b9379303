import pytest

from seaflow.scenario import execute, load_scenario


@pytest.fixture(scope="session")
def combined_run():
    return execute(load_scenario("combined"))


@pytest.fixture(scope="session")
def faults_run():
    return execute(load_scenario("faults"))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
