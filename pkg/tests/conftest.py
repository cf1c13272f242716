import numpy as np
import pytest

from mpdit.config import preset
from mpdit.model import DiT

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            num, title = mark.args
            _criteria.setdefault(num, {"title": title, "tests": {}})["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["tests"]:
            prev = entry["tests"][report.nodeid]
            if report.failed:
                entry["tests"][report.nodeid] = "failed"
            elif report.when == "call" and prev is None:
                entry["tests"][report.nodeid] = "skipped" if report.skipped else "passed"
            elif report.skipped and prev is None:
                entry["tests"][report.nodeid] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_criteria):
        entry = _criteria[num]
        states = list(entry["tests"].values())
        if any(s is None for s in states):
            status = "NOT RUN"
        elif all(s == "passed" for s in states):
            status = "PASS"
        else:
            status = "FAIL"
        tr.write_line(f"criterion {num:2d} {status:7s} {entry['title']} ({len(states)} checks)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small double-precision model used across tests."""
    return preset("E", width=16, depth=2, heads=2, image_size=8, num_classes=3, diffusion_steps=32)


@pytest.fixture
def tiny_model(tiny_cfg):
    return DiT(tiny_cfg, seed=0)
