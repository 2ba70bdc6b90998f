import pytest
from hypothesis import HealthCheck, settings

from thermiq import data_path

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def scenarios():
    return data_path("scenarios")


@pytest.fixture(scope="session")
def case_study():
    from thermiq import engine
    cfg = engine.load_config(data_path("scenarios", "case_study.cfg"))
    sim = engine.Simulation(cfg)
    trace = sim.run()
    return sim, trace


_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    ok = rep.passed
    prev = _CRITERIA.get(number, (title, True, 0.0))
    _CRITERIA[number] = (title, prev[1] and ok, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, secs = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {title} ({secs:.2f} s)")
