from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from sagnet.model import ModelConfig, SagParams
from sagnet.network import Edge, EdgeClass, NetworkTopology, build_topology, res, seg


def tree_network(parents: list[int], dams: list[int], dists: list[float]) -> NetworkTopology:
    """Segment ``i > 0`` drains to ``parents[i-1] < i``; reservoir k sits on the outflow of ``dams[k]``."""
    n = len(parents) + 1
    dam_of = {s: k for k, s in enumerate(dams)}
    edges = []
    for i in range(1, n):
        d = dists[i - 1]
        if i in dam_of:
            k = dam_of[i]
            edges.append(Edge(seg(i), res(k), EdgeClass.SEG_TO_RES, d * 0.4))
            edges.append(Edge(res(k), seg(parents[i - 1]), EdgeClass.RES_TO_SEG, d * 0.6))
        else:
            edges.append(Edge(seg(i), seg(parents[i - 1]), EdgeClass.SEG_TO_SEG, d))
    nodes = [seg(i) for i in range(n)] + [res(k) for k in range(len(dams))]
    return build_topology(nodes, edges)


@st.composite
def river_networks(draw, min_segments: int = 2, max_segments: int = 9, max_reservoirs: int = 3):
    n = draw(st.integers(min_segments, max_segments))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    m = draw(st.integers(0, min(max_reservoirs, n - 1)))
    dams = draw(st.lists(st.integers(1, n - 1), min_size=m, max_size=m, unique=True)) if m else []
    dists = draw(st.lists(st.floats(100.0, 20000.0), min_size=n - 1, max_size=n - 1))
    return tree_network(parents, dams, dists)


@pytest.fixture
def fork_topology() -> NetworkTopology:
    """Two headwaters (2, 3) join at 1; reservoir 0 sits between 3 and 1; 1 drains to outlet 0."""
    return tree_network([0, 1, 1], [3], [4000.0, 6000.0, 9000.0])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_params(cfg: ModelConfig, rng: np.random.Generator) -> SagParams:
    return SagParams.initialize(cfg, rng, bias_scale=0.5)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
