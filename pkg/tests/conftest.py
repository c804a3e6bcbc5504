import math
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from mcegnn import data  # noqa: E402
from mcegnn._alloc import tune_allocator  # noqa: E402
from mcegnn.egnn import GraphBatch, MCEGNNConfig, collate, fully_connected_edges  # noqa: E402

tune_allocator()

# (name, passed, detail) rows filled by the acceptance suite
ACCEPTANCE = []


def record(name, passed, detail=""):
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def random_graph(rng, n=5, n_graphs=1, in_node=1, edge_dim=1, velocities=True):
    graphs = []
    for _ in range(n_graphs):
        dst, src = fully_connected_edges(n)
        graphs.append(
            GraphBatch(
                rng.normal(size=(n, 3)),
                rng.normal(size=(n, in_node)),
                dst,
                src,
                rng.normal(size=(n, 3)) if velocities else None,
                rng.normal(size=(len(dst), edge_dim)) if edge_dim else None,
            )
        )
    return collate(graphs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    return MCEGNNConfig(n_layers=3, hidden=8, channels=3, in_node=1, edge_dim=1, velocity_mode=True)


def two_body(r=1.0, M=1.0, m=1e-3):
    """Circular two-body state in the centre-of-mass frame (G = 1)."""
    mu = M + m
    v = math.sqrt(mu / r)
    x = np.array([[0.0, 0.0, 0.0], [r, 0.0, 0.0]])
    vel = np.array([[0.0, 0.0, 0.0], [0.0, v, 0.0]])
    masses = np.array([M, m])
    x = x - (masses[:, None] * x).sum(0) / mu
    vel = vel - (masses[:, None] * vel).sum(0) / mu
    return x, vel, masses


def run_two_body(dt, t_end, r=1.0, record_every=1):
    x, v, masses = two_body(r)
    n = int(round(t_end / dt))
    xs, vs = data.integrate(x, v, data.gravity_coupling(masses), n, dt, 0.0, record_every)
    return xs
