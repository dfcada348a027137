import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reciprocity.events import events_from_rows  # noqa: E402


def random_intervals(rng: np.random.Generator, n: int, p: int, tie_grid: int = 6):
    """Small counting-process dataset with deliberate ties on an integer grid."""
    start = rng.integers(0, tie_grid, n).astype(float)
    stop = start + rng.integers(1, tie_grid, n)
    event = rng.random(n) < 0.5
    event[0] = True
    X = rng.normal(size=(n, p))
    X[:, 0] = rng.integers(0, 2, n)
    return start, stop, event, X


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_corpus():
    """Two users over five days: one answered question and one help answer."""
    rows = [
        ("alice", "question", "1", "", "2020-01-03T00:00:00Z", 0, "python|pandas"),
        ("bob", "answer", "2", "1", "2020-01-03T04:00:00Z", 0, ""),
        ("bob", "question", "3", "", "2020-01-03T10:00:00Z", 2, "java"),
        ("alice", "answer", "4", "3", "2020-01-04T06:00:00Z", 1, ""),
    ]
    return events_from_rows(rows, corpus_start=1577836800, corpus_end=1578268800)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.REPORT, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
