import numpy as np
import pytest

from aspect.graphcore import Graph


def random_graph(rng, n, p=0.15, self_loops=True):
    upper = np.triu(rng.random((n, n)) < p, 1)
    s, d = np.nonzero(upper)
    return Graph.from_edges(n, s, d, self_loops=self_loops)


def numeric_grad(f, x, eps=1e-6, idx=None):
    """Central differences of scalar ``f`` at ``x`` (all coordinates or ``idx``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if idx is None else np.asarray(idx)
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        out[n] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, b):
    """Norm-wise relative difference."""
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def coord_rel_err(num, ana, floor=1e-6):
    """Coordinate-wise relative differences with an absolute floor for near-zero entries."""
    num, ana = np.ravel(num), np.ravel(ana)
    return np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
