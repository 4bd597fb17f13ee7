import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sagnet.network import (BadEdgeClass, CycleDetected, DegenerateDistances, Edge, EdgeClass,
                            NodeKind, UnknownNode, build_topology, compute_adjacency,
                            logistic_weights, read_edges_csv, res, seg, write_edges_csv)

from .conftest import river_networks, tree_network
from .oracles import reachable_from


def star(distances):
    """Headwaters 1..n each draining straight into outlet 0."""
    edges = [Edge(seg(i + 1), seg(0), EdgeClass.SEG_TO_SEG, d) for i, d in enumerate(distances)]
    return build_topology([seg(i) for i in range(len(distances) + 1)], edges)


def test_three_distance_fixture():
    topo = star([10.0, 20.0, 30.0])
    A = compute_adjacency(topo)
    got = [A[1, 0], A[2, 0], A[3, 0]]
    np.testing.assert_allclose(got, [0.7729, 0.5, 0.2271], atol=1e-4)


def test_fixture_by_hand():
    # z-scores with the population standard deviation, then 1 / (1 + e^z)
    d = np.array([10.0, 20.0, 30.0])
    z = (d - d.mean()) / np.sqrt(((d - d.mean()) ** 2).mean())
    np.testing.assert_allclose(logistic_weights(d), 1.0 / (1.0 + np.exp(z)), rtol=0, atol=1e-15)


def test_equal_distances_warn_and_give_half():
    with pytest.warns(DegenerateDistances):
        A = compute_adjacency(star([500.0, 500.0]))
    assert A[1, 0] == A[2, 0] == 0.5


def test_adjacency_zero_off_closure(fork_topology):
    A = compute_adjacency(fork_topology)
    pairs = {(fork_topology.node_index(s), fork_topology.node_index(d))
             for s, d, _ in fork_topology.connected_pairs()}
    for a in range(A.shape[0]):
        for b in range(A.shape[1]):
            if (a, b) in pairs:
                assert 0.0 < A[a, b] < 1.0
            else:
                assert A[a, b] == 0.0


def test_fork_closures(fork_topology):
    t = fork_topology
    assert t.upstream_segments[0] == {1, 2, 3}
    assert t.upstream_segments[1] == {2, 3}
    assert t.upstream_reservoirs[1] == {0} and t.upstream_reservoirs[0] == {0}
    assert t.upstream_reservoirs[2] == set()
    assert t.reservoir_inflow[0] == {3}
    assert t.reservoir_downstream[0] == {0, 1}
    assert t.downstream_union() == {0, 1}


@settings(max_examples=200, deadline=None)
@given(river_networks())
def test_closures_match_breadth_first_reachability(topo):
    adj = {}
    for e in topo.edges:
        adj.setdefault(e.source, []).append(e.target)
    for i in range(topo.n_segments):
        ups = {s for s in [seg(j) for j in range(topo.n_segments)] + [res(k) for k in range(topo.n_reservoirs)]
               if seg(i) in reachable_from(adj, s)}
        assert topo.upstream_segments[i] == {n.index for n in ups if n.kind is NodeKind.SEGMENT}
        assert topo.upstream_reservoirs[i] == {n.index for n in ups if n.kind is NodeKind.RESERVOIR}
    for k in range(topo.n_reservoirs):
        down = reachable_from(adj, res(k))
        assert topo.reservoir_downstream[k] == {n.index for n in down if n.kind is NodeKind.SEGMENT}
        assert topo.reservoir_inflow[k] == {j for j in range(topo.n_segments)
                                            if res(k) in reachable_from(adj, seg(j))}


@settings(max_examples=200, deadline=None)
@given(river_networks(min_segments=3))
def test_adjacency_monotone_in_distance(topo):
    pairs = topo.connected_pairs()
    if len(pairs) < 2:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDistances)
        A = compute_adjacency(topo)
    vals = [(topo.distances[(s, d)], A[topo.node_index(s), topo.node_index(d)]) for s, d, _ in pairs]
    for d1, a1 in vals:
        for d2, a2 in vals:
            if d1 < d2:
                assert a1 > a2 or np.isclose(a1, a2, rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1.0, 1e5), min_size=2, max_size=30))
def test_logistic_weights_bounded_and_order_reversing(raw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDistances)
        w = logistic_weights(np.array(raw))
    assert ((w > 0) & (w < 1)).all()
    order = np.argsort(raw, kind="stable")
    assert (np.diff(w[order]) <= 1e-15).all()


def test_path_distance_sums_edges(fork_topology):
    d = fork_topology.distances
    assert d[(seg(3), seg(0))] == pytest.approx(9000.0 + 4000.0)
    assert d[(res(0), seg(1))] == pytest.approx(9000.0 * 0.6)


def test_cycle_rejected():
    edges = [Edge(seg(0), seg(1), EdgeClass.SEG_TO_SEG, 1.0), Edge(seg(1), seg(0), EdgeClass.SEG_TO_SEG, 1.0)]
    with pytest.raises(CycleDetected):
        build_topology([seg(0), seg(1)], edges)


def test_edge_class_must_match_node_kinds():
    with pytest.raises(BadEdgeClass):
        build_topology([seg(0), res(0)], [Edge(seg(0), res(0), EdgeClass.SEG_TO_SEG, 1.0)])


def test_unknown_node_rejected():
    with pytest.raises(UnknownNode):
        build_topology([seg(0)], [Edge(seg(1), seg(0), EdgeClass.SEG_TO_SEG, 1.0)])


def test_edges_csv_round_trip(tmp_path, fork_topology):
    path = tmp_path / "edges.csv"
    write_edges_csv(fork_topology, path)
    assert path.read_text().splitlines()[0] == \
        "source_kind,source_id,target_kind,target_id,edge_class,stream_distance_m"
    again = read_edges_csv(path, fork_topology.n_segments, fork_topology.n_reservoirs)
    assert again.edges == fork_topology.edges
    np.testing.assert_array_equal(compute_adjacency(again), compute_adjacency(fork_topology))


def test_relabel_permutes_adjacency(fork_topology):
    perm = [2, 0, 3, 1]
    moved = fork_topology.relabeled(perm)
    A, B = compute_adjacency(fork_topology), compute_adjacency(moved)
    idx = perm + [4]
    for a in range(5):
        for b in range(5):
            assert B[idx[a], idx[b]] == A[a, b]


def test_per_class_standardization_differs(fork_topology):
    joint = compute_adjacency(fork_topology)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDistances)
        split = compute_adjacency(fork_topology, per_class=True)
    assert (joint != 0).sum() == (split != 0).sum()
    assert not np.allclose(joint, split)


def test_tree_helper_builds_expected_sizes():
    topo = tree_network([0, 0, 1], [2], [1.0, 2.0, 3.0])
    assert (topo.n_segments, topo.n_reservoirs) == (4, 1)
