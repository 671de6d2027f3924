import numpy as np
import pytest

from jointcanvas.config import default_setup

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.fixture
def criterion(request):
    """Record ``(passed, detail)`` for the acceptance criterion of the calling test."""
    n = request.node.get_closest_marker("acceptance").args[0]

    def record(passed: bool, detail: str) -> None:
        request.config.stash[ACCEPTANCE][n] = (bool(passed), detail)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark and rep.when == "call" and rep.failed:
        table = item.config.stash[ACCEPTANCE]
        if mark.args[0] not in table:
            table[mark.args[0]] = (False, f"error: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(ACCEPTANCE, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        passed, detail = table[n]
        terminalreporter.write_line(f"ACCEPTANCE {n:>2} {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def setup():
    return default_setup()


@pytest.fixture(scope="session")
def arm(setup):
    return setup.arm


@pytest.fixture(scope="session")
def rig(setup):
    return setup.rig


def random_q(arm, rng, margin=0.1):
    lo, hi = arm.limits[:, 0] + margin, arm.limits[:, 1] - margin
    return rng.uniform(lo, hi)
