import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sagnet import model as sm
from sagnet.autodiff import ShapeMismatch, Tensor
from sagnet.model import (EmptyDownstreamSet, MissingEmbedding, ModelConfig, ModelInputs,
                          SagModel, SagParams, ZeroTotalFlow, ZeroTotalFlowWarning,
                          aggregate_forecaster_states, flow_average_temperature,
                          load_checkpoint, release_temperature_series, save_checkpoint)
from sagnet.network import AdjacencyBlocks, compute_adjacency

from . import oracles as orc
from .conftest import random_params, tree_network
from .equation_cases import EQUATIONS, discrepancies, random_case

pos = st.floats(1e-3, 1e4, allow_nan=False)
temp = st.floats(-5.0, 40.0, allow_nan=False)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_equations_match_straight_line_oracles(seed):
    worst = discrepancies(random_case(np.random.default_rng(seed)))
    assert set(worst) == set(EQUATIONS)
    for name, err in worst.items():
        assert err <= 1e-10, name


# ------------------------------------------------------------ full episodes

def two_dam_basin():
    """Outlet 0; 1 and 4 drain to 0; 2 and 3 to 1; 5 to 4.  Dams below 3 and 5."""
    return tree_network([0, 1, 1, 0, 4], [3, 5], [3000.0, 5000.0, 8000.0, 4000.0, 12000.0])


def episode(rng, routing, T=6, D=3, Dx=2, L=2):
    topo = two_dam_basin()
    A = compute_adjacency(topo)
    N, M = topo.n_segments, topo.n_reservoirs
    cfg = ModelConfig(n_features=Dx, hidden=D, n_meta=5, n_layers=L)
    P = random_params(cfg, rng)
    drivers = rng.normal(size=(T, N, Dx))
    meta = rng.normal(size=(M, 5))
    se = rng.normal(size=(T, M, L + 1))
    htilde = rng.uniform(-1, 1, (T, N, D))
    blocks = AdjacencyBlocks.from_matrix(A, N)
    r1 = np.asarray(routing, dtype=bool)
    inputs = ModelInputs(drivers, meta, blocks, r1=r1, se=se,
                         pp=aggregate_forecaster_states(htilde, blocks.res_seg))
    Adict = {(a, b): A[a, b] for a in range(N + M) for b in range(N + M)}
    return topo, cfg, P, inputs, Adict, htilde


@pytest.mark.parametrize("routing", [(True, True), (False, False), (True, False)])
def test_full_sequence_matches_node_by_node_oracle(rng, routing):
    topo, cfg, P, inputs, A, htilde = episode(rng, routing)
    got, _ = SagModel(cfg, P).forward_sequence(inputs)
    want = orc.run_network(P.to_arrays(), A, topo, inputs.drivers.tolist(), inputs.meta.tolist(),
                           routing, se=inputs.se.tolist(), htilde=htilde.tolist())
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_node_processing_order_is_irrelevant(rng):
    topo, cfg, P, inputs, A, htilde = episode(rng, (True, False))
    args = (P.to_arrays(), A, topo, inputs.drivers.tolist(), inputs.meta.tolist(), (True, False))
    fwd = orc.run_network(*args, se=inputs.se.tolist(), htilde=htilde.tolist())
    back = orc.run_network(*args, se=inputs.se.tolist(), htilde=htilde.tolist(),
                           order=reversed(range(topo.n_segments)))
    assert fwd == back  # bitwise: every read is of t-1 values


def test_segment_relabeling_permutes_predictions(rng):
    topo, cfg, P, inputs, _, htilde = episode(rng, (True, False))
    perm = [3, 5, 0, 1, 4, 2]
    moved = topo.relabeled(perm)
    blocks = AdjacencyBlocks.from_matrix(compute_adjacency(moved), moved.n_segments)
    inv = np.argsort(perm)
    drivers = inputs.drivers[:, inv, :]
    pp = aggregate_forecaster_states(htilde[:, inv, :], blocks.res_seg)
    moved_inputs = ModelInputs(drivers, inputs.meta, blocks, r1=inputs.r1, se=inputs.se, pp=pp)
    base, _ = SagModel(cfg, P).forward_sequence(inputs)
    again, _ = SagModel(cfg, P).forward_sequence(moved_inputs)
    np.testing.assert_allclose(again[perm], base, rtol=0, atol=1e-12)


def test_predictions_are_causal(rng):
    topo, cfg, P, inputs, _, _ = episode(rng, (True, False), T=8)
    base, _ = SagModel(cfg, P).forward_sequence(inputs)
    inputs.drivers[5:] += 3.0
    inputs.se[5:] -= 2.0
    inputs.pp[5:] *= -1.0
    changed, _ = SagModel(cfg, P).forward_sequence(inputs)
    np.testing.assert_array_equal(changed[:, :5], base[:, :5])
    assert not np.allclose(changed[:, 5:], base[:, 5:])


def test_chunked_run_equals_single_pass(rng):
    topo, cfg, P, inputs, _, _ = episode(rng, (True, False), T=9)
    model = SagModel(cfg, P)
    whole, _ = model.forward_sequence(inputs)
    state = model.initial_state(inputs)
    parts = []
    for lo, hi in [(0, 4), (4, 7), (7, 9)]:
        y, state = model.run(inputs, lo, hi, state)
        parts.append(y.value)
    np.testing.assert_array_equal(np.concatenate(parts, axis=1), whole)


def test_headwater_without_reservoirs_sees_bias_only(rng):
    cfg = ModelConfig(n_features=2, hidden=3)
    P = random_params(cfg, rng)
    q = sm.transferred_from_segments(Tensor(rng.normal(size=(2, 3))), np.zeros((2, 2)), P)
    np.testing.assert_allclose(q.value, np.tile(np.tanh(P["b_q"].value), (2, 1)), atol=1e-15)
    p = sm.transferred_from_reservoirs(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))),
                                       Tensor(np.zeros((0, 3))), np.zeros((2, 0)), P)
    np.testing.assert_allclose(p.value, np.tile(np.tanh(P["b_p"].value), (2, 1)), atol=1e-15)


def test_pp_aggregation_uses_linearity(rng):
    cfg = ModelConfig(n_features=2, hidden=4)
    P = random_params(cfg, rng)
    res_seg = np.array([[0.3, 0.0, 0.8], [0.0, 0.6, 0.0]])
    ht = rng.normal(size=(5, 3, 4))
    agg = aggregate_forecaster_states(ht, res_seg)
    for t in range(5):
        direct = sm.pp_release_embedding(ht[t], res_seg, P).value
        via_sum = agg[t] @ P["W_pp"].value.T + P["b_pp"].value
        np.testing.assert_allclose(direct, via_sum, rtol=0, atol=1e-12)


def test_pp_needs_downstream_segments(rng):
    P = random_params(ModelConfig(n_features=2, hidden=2), rng)
    with pytest.raises(EmptyDownstreamSet):
        sm.pp_release_embedding(np.ones((2, 2)), np.array([[0.5, 0.0], [0.0, 0.0]]), P)


def test_se_width_checked(rng):
    P = random_params(ModelConfig(n_features=2, hidden=2, n_layers=2), rng)
    with pytest.raises(ShapeMismatch):
        sm.se_release_embedding(np.ones((1, 2)), P)


def test_missing_embeddings_rejected(rng):
    topo, cfg, P, inputs, _, _ = episode(rng, (True, False))
    inputs.pp = None
    with pytest.raises(MissingEmbedding):
        SagModel(cfg, P).forward_sequence(inputs)


# ------------------------------------------------------- flow-average temperature

@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(pos, temp), min_size=1, max_size=6), st.floats(1e-3, 1e3))
def test_flow_average_brute_force_and_scale_invariance(layers, alpha):
    f = [a for a, _ in layers]
    m = [b for _, b in layers]
    u = flow_average_temperature(f, m)
    assert u == orc.flow_average(f, m)
    assert min(m) - 1e-9 <= u <= max(m) + 1e-9
    assert abs(flow_average_temperature([alpha * x for x in f], m) - u) <= 1e-12 * max(1.0, abs(u))


def test_flow_average_hand_values():
    assert flow_average_temperature([100.0, 300.0], [20.0, 8.0]) == 11.0
    assert flow_average_temperature([0.0, 50.0], [25.0, 6.0]) == 6.0


def test_zero_release_raises():
    with pytest.raises(ZeroTotalFlow):
        flow_average_temperature([0.0, 0.0], [10.0, 5.0])


def test_series_matches_scalar_and_flags_zero_days():
    flows = np.array([[10.0, 30.0], [0.0, 0.0], [1.0, 0.0]])
    temps = np.array([[20.0, 10.0], [18.0, 6.0], [15.0, 5.0]])
    with pytest.warns(ZeroTotalFlowWarning):
        u, flagged = release_temperature_series(flows, temps)
    assert flagged.tolist() == [False, True, False]
    assert u[0] == flow_average_temperature(flows[0], temps[0])
    assert u[1] == 12.0 and u[2] == 15.0


# ------------------------------------------------------------------ params & io

def test_parameter_shapes_follow_config():
    cfg = ModelConfig(n_features=7, hidden=5, n_meta=5, n_layers=3, filter_layers=2)
    shapes = sm.param_shapes(cfg)
    assert shapes["U_f_x"] == (5, 7) and shapes["Z"] == (5, 4)
    assert shapes["f1_W0"] == (5, 5) and shapes["f1_W1"] == (5, 5)
    assert "W_pp" not in sm.param_shapes(ModelConfig(forecaster=True))
    assert sm.param_shapes(ModelConfig(use_sim_temp=False, n_layers=3))["Z"] == (20, 3)


def test_initialization_is_seeded_and_glorot_bounded():
    cfg = ModelConfig()
    a = SagParams.initialize(cfg, np.random.default_rng(3))
    b = SagParams.initialize(cfg, np.random.default_rng(3))
    for name in a.names():
        np.testing.assert_array_equal(a[name].value, b[name].value)
    W = a["W_f_h"].value
    assert np.abs(W).max() <= math.sqrt(6 / 40)
    assert not a["b_f"].value.any()


def test_checkpoint_round_trip_is_exact(tmp_path, rng):
    cfg = ModelConfig(n_features=3, hidden=4)
    P = random_params(cfg, rng)
    fcfg = ModelConfig(n_features=3, hidden=4, forecaster=True)
    F = random_params(fcfg, rng)
    path = tmp_path / "ck.json"
    save_checkpoint(path, model_config=cfg, params=P, extra={"note": 1}, forecaster=(fcfg, F))
    doc = load_checkpoint(path)
    assert doc["model_config"] == cfg and doc["extra"] == {"note": 1}
    for name in P.names():
        np.testing.assert_array_equal(doc["params"][name].value, P[name].value)
    assert doc["forecaster"][0] == fcfg
    again = tmp_path / "again.json"
    save_checkpoint(again, model_config=cfg, params=doc["params"], extra={"note": 1},
                    forecaster=doc["forecaster"])
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "old.json"
    path.write_text('{"format_version": 0}')
    with pytest.raises(sm.ModelError):
        load_checkpoint(path)


def test_zero_flow_warning_is_a_warning_class():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(ZeroTotalFlowWarning):
            release_temperature_series(np.zeros((1, 2)), np.ones((1, 2)))
