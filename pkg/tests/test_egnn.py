import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcegnn import equicheck as E
from mcegnn import tensor as T
from mcegnn.egnn import (
    EGNN,
    MCEGNN,
    GraphBatch,
    Layer,
    MCEGNNConfig,
    channel_schedule,
    collate,
    coord_update,
    edge_differences,
    fully_connected_edges,
    param_count,
    param_count_formula,
    position_residual,
    velocity_update,
)

from conftest import random_graph

NBODY = dict(n_layers=4, hidden=64, in_node=1, edge_dim=2, velocity_mode=True)


def test_channel_schedule():
    assert channel_schedule(4, 3) == [(1, 3), (3, 3), (3, 3), (3, 1)]
    assert channel_schedule(2, 5) == [(1, 5), (5, 1)]
    assert channel_schedule(1, 5) == [(1, 1)]


def test_config_roundtrip_and_validation():
    cfg = MCEGNNConfig(channels=3, hidden=16)
    assert MCEGNNConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.message == 16
    with pytest.raises(ValueError):
        MCEGNNConfig.from_dict({"chanels": 2})
    with pytest.raises(ValueError):
        MCEGNNConfig(channels=0)
    with pytest.raises(ValueError):
        MCEGNNConfig(readout="mean")
    with pytest.raises(ValueError):
        MCEGNNConfig(velocity_init_gain=0.0)


def test_velocity_gain_scales_last_phi_v_layer():
    big = MCEGNN(MCEGNNConfig(n_layers=2, hidden=8, velocity_mode=True), seed=3).state_dict()
    small = MCEGNN(MCEGNNConfig(n_layers=2, hidden=8, velocity_mode=True, velocity_init_gain=1e-3), seed=3).state_dict()
    scaled = [k for k in big if not np.array_equal(big[k], small[k])]
    assert scaled and all("phi_v" in k for k in scaled)
    for k in scaled:
        assert np.allclose(small[k], 1e-3 * big[k], rtol=1e-12, atol=0)


def test_graph_batch_validation():
    x = np.zeros((3, 3))
    with pytest.raises(ValueError):
        GraphBatch(x, np.zeros(3), [0], [0])
    with pytest.raises(ValueError):
        GraphBatch(x, np.zeros(3), [0], [5])
    with pytest.raises(ValueError):
        GraphBatch(x, np.zeros(3), [0], [1], graph=[0, 1, 1])
    b = GraphBatch(x, np.zeros(3), [2, 0, 1], [0, 1, 0], edge_attr=[[3.0], [1.0], [2.0]])
    assert b.dst.tolist() == [0, 1, 2]
    assert b.edge_attr[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_edge_differences_antisymmetric(rng):
    b = random_graph(rng, n=4)
    X = T.Tensor(rng.normal(size=(4, 3, 2)))
    d = edge_differences(X, b).data
    lookup = {(i, j): k for k, (i, j) in enumerate(zip(b.dst, b.src))}
    for (i, j), k in lookup.items():
        assert np.array_equal(d[k], -d[lookup[(j, i)]])


def _unit_layer(m_in=1, m_out=1):
    cfg = MCEGNNConfig(n_layers=1, hidden=2, channels=1)
    layer = Layer(cfg, m_in, m_out, 0, 0)
    return layer


def test_single_edge_hand_case():
    # Phi_x == 1 and C == 1 must give x_i + (x_i - x_j)
    layer = _unit_layer()
    layer.phi_x.weights[-1].data[:] = 0.0
    layer.phi_x.biases[-1] = T.Tensor(np.ones(1))
    b = GraphBatch(np.array([[1.0, 2.0, 3.0], [0.5, 0.0, -1.0]]), np.zeros(2), [0], [1])
    X = T.Tensor(b.x[:, :, None])
    msg = T.Tensor(np.zeros((1, layer.phi_e.out_width)))
    out = coord_update(layer, X, edge_differences(X, b), msg, np.ones(2), b).data[:, :, 0]
    assert np.array_equal(out[0], [1.5, 4.0, 7.0])
    assert np.array_equal(out[1], b.x[1])


def test_duplicate_edge_doubles_contribution(rng):
    layer = _unit_layer()
    x = rng.normal(size=(2, 3))
    X = T.Tensor(x[:, :, None])
    msg = T.Tensor(rng.normal(size=(1, layer.phi_e.out_width)))
    one = GraphBatch(x, np.zeros(2), [0], [1])
    two = GraphBatch(x, np.zeros(2), [0, 0], [1, 1])
    u1 = coord_update(layer, X, edge_differences(X, one), msg, np.ones(2), one, residual=False).data
    msg2 = T.concat([msg, msg], axis=0)
    u2 = coord_update(layer, X, edge_differences(X, two), msg2, np.ones(2), two, residual=False).data
    assert np.allclose(u2, 2 * u1, rtol=1e-15, atol=0)


def test_residual_rules():
    X1 = T.Tensor(np.arange(6.0).reshape(2, 3, 1))
    b = position_residual(X1, 1, 3).data
    assert b.shape == (2, 3, 3) and all(np.array_equal(b[:, :, c], X1.data[:, :, 0]) for c in range(3))
    p = position_residual(X1, 1, 3, lift="position").data
    assert np.array_equal(p[:, :, 0], X1.data[:, :, 0]) and not p[:, :, 1:].any()
    X3 = T.Tensor(np.arange(18.0).reshape(2, 3, 3))
    assert np.array_equal(position_residual(X3, 3, 1).data[:, :, 0], X3.data[:, :, 0])
    assert position_residual(X3, 3, 3) is X3


def test_velocity_update_zero_velocity_reduces_to_coord_update(rng):
    cfg = MCEGNNConfig(n_layers=2, hidden=4, channels=2, velocity_mode=True)
    layer = Layer(cfg, 2, 2, 0, 1)
    b = random_graph(rng, n=4, edge_dim=0)
    X = T.Tensor(rng.normal(size=(4, 3, 2)))
    h = T.Tensor(rng.normal(size=(4, 4)))
    d = edge_differences(X, b)
    msg = T.Tensor(rng.normal(size=(b.n_edges, 4)))
    coef = 1.0 / b.degree()
    V, Xn = velocity_update(layer, T.zeros((4, 3)), h, X, d, msg, coef, b)
    assert np.array_equal(Xn.data, coord_update(layer, X, d, msg, coef, b).data)
    with pytest.raises(ValueError):
        velocity_update(layer, None, h, X, d, msg, coef, b)


def test_forward_shapes(rng, small_cfg):
    b = random_graph(rng, n=5, n_graphs=2)
    out = MCEGNN(small_cfg, seed=0).forward(b, return_all=True)
    assert out["out"].shape == (10, 3)
    assert [x.shape[2] for x in out["X"]] == [3, 3, 1]
    assert len(out["V"]) == 3


def test_missing_inputs_error(rng, small_cfg):
    model = MCEGNN(small_cfg)
    with pytest.raises(ValueError):
        model(random_graph(rng, velocities=False))
    with pytest.raises(ValueError):
        model(random_graph(rng, edge_dim=0))


def test_param_count_formula_matches_instances():
    for m in (1, 2, 5, 10, 25):
        for extra in ({}, {"velocity_mode": False}, {"readout": "invariant_scalar", "out_dim": 3}):
            cfg = MCEGNNConfig(**dict(NBODY, channels=m, **extra))
            assert param_count(MCEGNN(cfg)) == param_count_formula(cfg)


def test_nbody_default_param_counts():
    counts = [param_count_formula(MCEGNNConfig(**NBODY, channels=m)) for m in (1, 2, 5, 10, 25)]
    assert counts[0] == 134020
    assert all(a < b for a, b in zip(counts, counts[1:]))
    assert counts[1] / counts[0] <= 1.02


def test_state_dict_roundtrip_and_mismatch(small_cfg):
    a, b = MCEGNN(small_cfg, seed=1), MCEGNN(small_cfg, seed=2)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    other = MCEGNN(MCEGNNConfig(**dict(small_cfg.to_dict(), channels=2)))
    with pytest.raises(ValueError):
        other.load_state_dict(a.state_dict())


def test_egnn_layout_matches_m1():
    cfg = MCEGNNConfig(**NBODY)
    assert EGNN(cfg).layout() == MCEGNN(cfg).layout()
    with pytest.raises(ValueError):
        EGNN(MCEGNNConfig(**NBODY, channels=2))


@pytest.mark.parametrize("velocity", [False, True])
def test_m1_parity_with_single_channel(rng, velocity):
    cfg = MCEGNNConfig(n_layers=3, hidden=8, edge_dim=1, velocity_mode=velocity, coord_init_gain=1.0)
    batches = [random_graph(rng, n=5, n_graphs=2, velocities=velocity) for _ in range(3)]
    assert E.check_parity(MCEGNN(cfg, 4), EGNN(cfg, 4), batches, tol=1e-12).passed


def test_m2_differs_from_single_channel(rng):
    cfg1 = MCEGNNConfig(n_layers=3, hidden=8, edge_dim=1, coord_init_gain=1.0)
    cfg2 = MCEGNNConfig(**dict(cfg1.to_dict(), channels=2))
    b = random_graph(rng, velocities=False)
    out1 = EGNN(cfg1, 0)(b).data
    out2 = MCEGNN(cfg2, 0)(b).data
    assert np.abs(out1 - out2).max() > 1e-3


def test_invariant_readout(rng):
    cfg = MCEGNNConfig(n_layers=2, hidden=8, channels=2, edge_dim=1, readout="invariant_scalar", coord_init_gain=1.0)
    model = MCEGNN(cfg)
    b = random_graph(rng, n=4, n_graphs=3)
    assert model(b).shape == (3,)
    for r in E.check_all(model, b, trials=5):
        assert r.passed, r


def test_collate_offsets(rng):
    b = collate([random_graph(rng, n=3), random_graph(rng, n=4)])
    assert b.n_graphs == 2 and b.n_nodes == 7
    assert np.all(b.graph[b.dst] == b.graph[b.src])
    assert b.n_edges == 6 + 12
    d, s = fully_connected_edges(3, offset=2)
    assert d.min() == 2 and s.max() == 4


@settings(max_examples=15, deadline=None)
@given(
    m=st.sampled_from([1, 2, 3, 5]),
    velocity=st.booleans(),
    residual=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_equivariance_property(m, velocity, residual, seed):
    cfg = MCEGNNConfig(
        n_layers=3, hidden=8, channels=m, edge_dim=1, velocity_mode=velocity, residual_positions=residual,
        coord_init_gain=0.3,
    )
    g = np.random.default_rng(seed)
    b = random_graph(g, n=4, n_graphs=2, velocities=velocity)
    model = MCEGNN(cfg, seed)
    # a large coordinate gain can amplify outputs by 1e5; compare relative to that scale
    with T.no_grad():
        scale = max(1.0, float(np.abs(model(b).data).max()))
    for r in E.check_all(model, b, trials=3, tol=1e-9 * scale, seed=seed):
        assert r.passed, r


def test_position_lift_keeps_other_channels_translation_invariant(rng):
    cfg = MCEGNNConfig(n_layers=3, hidden=8, channels=3, edge_dim=1, lift_residual="position", coord_init_gain=1.0)
    model = MCEGNN(cfg)
    b = random_graph(rng, velocities=False)
    shift = np.array([0.3, -1.0, 2.0])
    a = model.forward(b, return_all=True)["X"][0].data
    c = model.forward(b.transformed(shift=shift), return_all=True)["X"][0].data
    assert np.abs(c[:, :, 0] - a[:, :, 0] - shift).max() < 1e-12
    assert np.abs(c[:, :, 1:] - a[:, :, 1:]).max() < 1e-12


def test_no_residual_translation_invariant(rng):
    cfg = MCEGNNConfig(n_layers=4, hidden=8, channels=3, edge_dim=1, residual_positions=False, coord_init_gain=1.0)
    model = MCEGNN(cfg)
    b = random_graph(rng, velocities=False)
    with T.no_grad():
        a = model(b).data
        c = model(b.transformed(shift=np.array([5.0, -3.0, 1.0]))).data
    assert np.abs(a - c).max() <= 1e-12
