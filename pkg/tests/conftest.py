import numpy as np
import pytest

from rpq.dataset import make_synthetic
from rpq.graph import ProximityGraph

_VERDICTS: dict[str, tuple[str, bool, str]] = {}
_OUTCOMES: dict[str, str] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(criterion, ok, detail)``."""

    def record(criterion: str, ok: bool, detail: str = "") -> bool:
        _VERDICTS[request.node.nodeid] = (criterion, bool(ok), detail)
        return bool(ok)

    return record


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    rows = []
    for nodeid, outcome in _OUTCOMES.items():
        if "test_acceptance.py" not in nodeid:
            continue
        if nodeid in _VERDICTS:
            criterion, ok, detail = _VERDICTS[nodeid]
            ok = ok and outcome == "passed"
        else:
            criterion, ok, detail = nodeid.split("::")[-1], False, f"no verdict recorded ({outcome})"
        rows.append((criterion, ok, detail))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in rows:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs_1k():
    return make_synthetic(1000, 16, 8, seed=5).data


def path_graph(n: int) -> ProximityGraph:
    lists = [[u for u in (v - 1, v + 1) if 0 <= u < n] for v in range(n)]
    return ProximityGraph.from_lists(lists, entry=0)


def complete_graph(n: int, entry: int = 0) -> ProximityGraph:
    return ProximityGraph.from_lists([[u for u in range(n) if u != v] for v in range(n)], entry=entry)


def random_graph(n: int, degree: int, seed: int) -> ProximityGraph:
    r = np.random.default_rng(seed)
    lists = []
    for v in range(n):
        others = np.delete(np.arange(n), v)
        lists.append(r.choice(others, size=min(degree, n - 1), replace=False).tolist())
    return ProximityGraph.from_lists(lists, entry=0, max_degree=degree)
