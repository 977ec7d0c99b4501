import numpy as np
import pytest
from hypothesis import settings

from bprvi.model import CohortData, ModelConfig

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_cohort(n, p, a, seed=0, response=True):
    rng = np.random.default_rng(seed)
    x = (rng.random((n, p)) < rng.uniform(0.1, 0.9, size=p)).astype(float)
    w = rng.standard_normal((n, a))
    y = (rng.random(n) < 0.3).astype(float) if response else None
    return CohortData(x, w, y)


@pytest.fixture
def small_cohort():
    return random_cohort(40, 3, 2, seed=11)


@pytest.fixture
def small_cfg():
    return ModelConfig(k_max=3)


# ------------------------------------------------------------ acceptance report

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, title = mark.args
    prev = _ACCEPTANCE.get(n, ("PASS", title, 0.0))
    status = prev[0]
    if rep.failed or (rep.when == "call" and rep.skipped):
        status = "FAIL"
    _ACCEPTANCE[n] = (status, title, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, secs = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title} ({secs:.1f} s)")
