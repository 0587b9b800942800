import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", derandomize=True, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance criteria report --------------------------------------------
# Tests tagged ``@pytest.mark.criterion(name)`` roll up into one pass/fail
# line per criterion at the end of the run.

_CRITERIA: dict[str, dict[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion evidenced by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    results = _CRITERIA.setdefault(mark.args[0], {})
    if rep.when == "call":
        results[item.nodeid] = rep.passed and results.get(item.nodeid, True)
    elif not rep.passed:
        results[item.nodeid] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, results in _CRITERIA.items():
        ok = bool(results) and all(results.values())
        passed = sum(results.values())
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}  {name}  ({passed}/{len(results)} tests)")
