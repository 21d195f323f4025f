import numpy as np
import pytest

from demsr import tensor


@pytest.fixture(autouse=True)
def _finite_checks():
    tensor.set_debug(True)
    yield
    tensor.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
    results = item.config._criteria
    prev = results.get(number, (title, "PASS"))[1]
    # every phase of every tagged test must pass
    results[number] = (title, max(prev, status, key=_RANK.get))


def pytest_terminal_summary(terminalreporter, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcome = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {outcome}  {title}")
