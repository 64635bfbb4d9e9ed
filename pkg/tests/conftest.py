import numpy as np
import pytest

from dyadsel.data import DyadicPanel, NodeTable, compose_pair_regressors
from dyadsel.montecarlo import DgpConfig, simulate_panel


def random_panel(n=12, T=2, seed=0, directed=False, q_w=1, p_select=0.7):
    """Small random panel with an excluded selection regressor."""
    rng = np.random.default_rng(seed)
    nodes = NodeTable(rng.normal(size=(n, T, q_w)), rng.normal(size=(n, T, 1)))
    src, dst, w, z = compose_pair_regressors(nodes, "sum", "sum", directed=directed)
    r = np.concatenate([w, z], axis=2)
    d = (rng.random((src.size, T)) < p_select).astype(np.int8)
    y = np.where(d == 1, w.sum(axis=2) + rng.normal(size=(src.size, T)), np.nan)
    return DyadicPanel(tuple(str(k) for k in range(n)), src, dst, d, y, w, r, directed=directed)


@pytest.fixture
def small_panel():
    return random_panel()


@pytest.fixture(scope="session")
def dgp_panel():
    return simulate_panel(DgpConfig(n=60, theta=-2.0, sigma=1.0, seed=11))


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
