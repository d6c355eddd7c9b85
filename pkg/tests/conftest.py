from __future__ import annotations

import re

import numpy as np
import pytest

from posegait.synthetic import generate_dataset

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_outcomes: dict[int, str] = {}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 subjects x 2 views x 6 walks of 24 frames."""
    root = tmp_path_factory.mktemp("small")
    return generate_dataset(root, subjects=4, views=2, frames=24, seed=3)


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    return generate_dataset(root, subjects=8, views=4, frames=60, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.failed:
        _outcomes[n] = "FAIL"
    elif report.when == "call" and n not in _outcomes:
        _outcomes[n] = "SKIP" if report.skipped else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status = _outcomes.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n}: {status:7s} {CRITERIA[n]}")
