from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from semrode import diffcore as dc
from semrode.textmodel import EmbeddingTable, Example, PooledClassifier

ROOT = Path(__file__).resolve().parents[1]
TOY = ROOT / "data" / "toy"
CONFIGS = ROOT / "configs"

FD_STEP = 1e-5
ABS_TOL, REL_TOL = 1e-6, 1e-4

# criterion lines collected by the acceptance module, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def grad_close(analytic: np.ndarray, numeric: np.ndarray) -> bool:
    tol = np.maximum(ABS_TOL, REL_TOL * np.maximum(np.abs(analytic), np.abs(numeric)))
    return bool(np.all(np.abs(analytic - numeric) <= tol))


def check_gradients(build, arrays: list[np.ndarray], weights: np.ndarray | None = None) -> bool:
    """Compare backprop through ``build(*nodes)`` with finite differences for every input.

    Non-scalar outputs are contracted with ``weights`` first so the whole
    Jacobian is exercised.
    """

    def scalar(out: dc.Node) -> dc.Node:
        if out.value.size == 1 and weights is None:
            return dc.sum(out) if out.value.ndim else out
        return dc.sum(dc.mul(out, dc.constant(weights)))

    nodes = [dc.tensor(a.copy(), requires_grad=True) for a in arrays]
    dc.backward(scalar(build(*nodes)))
    for k, arr in enumerate(arrays):
        def f(x, k=k):
            args = [dc.constant(x if j == k else a) for j, a in enumerate(arrays)]
            return float(scalar(build(*args)).value)

        num = numeric_grad(f, arr.copy())
        if not grad_close(nodes[k].grad, num):
            return False
    return True


def make_table(mapping: dict[str, list[float]]) -> EmbeddingTable:
    return EmbeddingTable.from_dict(mapping)


@pytest.fixture
def tiny_table() -> EmbeddingTable:
    return make_table({
        "good": [1.0, 0.2, 0.0],
        "great": [0.9, 0.3, 0.1],
        "bad": [-1.0, 0.2, 0.0],
        "awful": [-0.9, 0.25, 0.1],
        "movie": [0.0, 1.0, 0.2],
        "film": [0.05, 0.95, 0.25],
        "the": [0.0, 0.1, 1.0],
    })


@pytest.fixture
def tiny_data() -> list[Example]:
    return [
        Example(("the", "good", "movie"), 1),
        Example(("great", "film"), 1),
        Example(("the", "bad", "movie"), 0),
        Example(("awful", "film"), 0),
        Example(("good", "film", "the"), 1),
        Example(("bad", "the", "film"), 0),
    ]


@pytest.fixture
def tiny_model(tiny_table) -> PooledClassifier:
    return PooledClassifier(tiny_table, n_classes=2, hidden=5, seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
