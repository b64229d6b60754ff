import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rfforensics.rfdata import gen_dataset, split_dataset

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_ds():
    """4 devices x 30 frames x 64 samples, split 0.7/0.1/0.2."""
    return split_dataset(gen_dataset(4, 30, 64, master_seed=3), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -----------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    num, title = marks
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "tests": 0})
    if report.when == "call" or report.outcome != "passed":
        entry["tests"] += report.when == "call"
        entry["ok"] &= report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"C{num:<3d}{status}  {e['title']}")
