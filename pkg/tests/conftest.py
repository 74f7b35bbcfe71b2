import numpy as np
import pytest

from fluxgrad.cli import parse_model, shipped_model_path
from fluxgrad.network import Reaction, ReactionNetwork

_CRITERIA_KEY = pytest.StashKey[list]()


def load(name):
    return parse_model(shipped_model_path(name))


def a_to_b(kf=2.0, kb=1.0):
    return ReactionNetwork(["A", "B"], [Reaction([1, 0], [0, 1], kf, kb)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict line; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def record(number, name, passed, detail=""):
        lines.append((number, name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(lines, key=lambda x: x[0]):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {name} {detail}".rstrip())
