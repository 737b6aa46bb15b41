from __future__ import annotations

import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: dict[int, str] = {}
_outcomes: dict[int, list[bool]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test gates")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    _criteria[n] = title
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _outcomes[n].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        results = _outcomes.get(n, [])
        status = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {_criteria[n]} ({sum(results)}/{len(results)} checks)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy():
    from framelens.harness.toy import ToyAdapter

    return ToyAdapter()


@pytest.fixture(scope="session")
def toy_trips():
    from framelens.harness.toy import toy_triplets

    return toy_triplets(10, seed=0)


@pytest.fixture
def fixtures_dir():
    return FIXTURES
