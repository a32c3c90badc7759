import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance verdict lines --------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config._criteria = {}


@pytest.fixture(autouse=True)
def _criterion_tag(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", marker.args))
    yield


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        number, title = props["criterion"]
        detail = props.get("detail", "")
        verdict = "PASS" if report.passed else "FAIL"
        store = pytest_runtest_logreport.config._criteria
        store[number] = f"criterion {number:>2} {verdict}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_sessionstart(session):
    pytest_runtest_logreport.config = session.config


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
