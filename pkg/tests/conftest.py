import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> {"ok": bool, "details": [str]}
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and not rep.failed:
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]
    if rep.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["details"]:
            line += "  " + "; ".join(e["details"])
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
