import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stable_lpc(rng, order=16, max_reflection=0.9):
    """Predictor coefficients built from random reflection coefficients (always stable)."""
    ks = rng.uniform(-max_reflection, max_reflection, order)
    a = np.zeros(0)
    for k in ks:
        a = np.concatenate([a - k * a[::-1], [k]])
    return a


@pytest.fixture
def stable_lpc():
    return random_stable_lpc


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion after the run

_criteria: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else rep.when + " failed"
    status = "PASS" if rep.passed else "FAIL"
    _criteria[number] = f"criterion {number:2d} {status}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_criteria):
            terminalreporter.write_line(_criteria[number])
