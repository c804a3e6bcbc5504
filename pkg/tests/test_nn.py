import math

import numpy as np
import pytest

from mcegnn import nn
from mcegnn import tensor as T

from conftest import numeric_grad


def test_glorot_bounds_and_zero_bias():
    m = nn.mlp_new([64, 64, 3], seed=0)
    assert np.abs(m.weights[0].data).max() <= math.sqrt(6 / 128)
    assert np.abs(m.weights[0].data).max() > 0.9 * math.sqrt(6 / 128)
    assert all(np.array_equal(b.data, np.zeros_like(b.data)) for b in m.biases)


def test_param_count_and_determinism():
    a = nn.mlp_new([3, 4, 2], seed=5)
    assert a.param_count() == 3 * 4 + 4 + 4 * 2 + 2
    b = nn.mlp_new([3, 4, 2], seed=5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    c = nn.mlp_new([3, 4, 2], seed=6)
    assert not np.array_equal(a.weights[0].data, c.weights[0].data)
    assert nn.mlp_new([3, 4, 2], final_bias=False).param_count() == 3 * 4 + 4 + 4 * 2


def test_final_gain_scales_last_layer_only():
    a = nn.mlp_new([4, 4, 2], seed=1)
    b = nn.mlp_new([4, 4, 2], seed=1, final_gain=1e-3)
    assert np.array_equal(a.weights[0].data, b.weights[0].data)
    assert np.allclose(b.weights[1].data, 1e-3 * a.weights[1].data, rtol=1e-12, atol=0)


def test_activation_layout():
    assert nn.mlp_new([2, 3, 3, 1]).activations == ["silu", "silu", "identity"]
    assert nn.mlp_new([2, 3], final_activation=True).activations == ["silu"]


def test_forward_shape_and_width_errors():
    m = nn.mlp_new([3, 5, 2])
    assert m(T.zeros((7, 3))).shape == (7, 2)
    with pytest.raises(T.ShapeError):
        m(T.zeros((7, 4)))
    with pytest.raises(ValueError):
        nn.mlp_new([3])
    with pytest.raises(ValueError):
        nn.mlp_new([3, 0, 1])


def test_mlp_gradcheck(rng):
    m = nn.mlp_new([3, 6, 2], seed=2)
    x = T.Tensor(rng.normal(size=(4, 3)))
    params = m.parameters()
    T.backward(T.sum(T.silu(m(x))), params)
    for p in params:
        num = numeric_grad(lambda: T.sum(T.silu(m(x))).item(), p.data)
        assert np.allclose(p.grad, num, rtol=1e-5, atol=1e-9)


def test_clip_global_norm():
    params = [T.Tensor(np.zeros(3), requires_grad=True), T.Tensor(np.zeros(4), requires_grad=True)]
    params[0].grad = np.array([6.0, 0.0, 0.0])
    params[1].grad = np.array([0.0, 8.0, 0.0, 0.0])
    pre = nn.clip_global_norm(params, 1.0)
    assert pre == 10.0
    assert abs(nn.global_grad_norm(params) - 1.0) < 1e-12
    params[0].grad = np.array([0.3, 0.0, 0.0])
    params[1].grad = np.zeros(4)
    nn.clip_global_norm(params, 1.0)
    assert np.array_equal(params[0].grad, [0.3, 0.0, 0.0])
    with pytest.raises(ValueError):
        nn.clip_global_norm(params, 0.0)


def test_adam_first_step_is_lr_times_sign():
    p = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = nn.Adam([p], lr=0.1)
    p.grad = np.array([0.5, -4.0, 1e-3])
    nn.adam_step(opt)
    # bias correction makes step 1 equal to lr * g / (|g| + eps')
    assert np.allclose(p.data, [0.9, -1.9, 2.9], rtol=0, atol=1e-6)
    assert p.grad is None


def test_adam_zero_grad_from_fresh_state_is_noop():
    p = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = nn.Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_zero_lr_moves_nothing_but_updates_moments():
    p = T.Tensor(np.array([1.0]), requires_grad=True)
    opt = nn.Adam([p], lr=0.0)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data[0] == 1.0
    assert opt.m[0][0] == pytest.approx(0.2)


def test_adam_matches_reference_loop():
    g = np.random.default_rng(0)
    grads = [g.normal(size=4) for _ in range(5)]
    p = T.Tensor(np.ones(4), requires_grad=True)
    opt = nn.Adam([p], lr=0.01)
    for gr in grads:
        p.grad = gr.copy()
        opt.step()
    x, m, v = np.ones(4), np.zeros(4), np.zeros(4)
    for t, gr in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, x, rtol=0, atol=1e-15)


def test_adam_missing_grad_errors():
    p = T.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        nn.Adam([p]).step()


def test_cosine_lr():
    assert nn.cosine_lr(1.0, 0, 11) == 1.0
    assert nn.cosine_lr(1.0, 5, 11) == pytest.approx(0.5)
    assert nn.cosine_lr(1.0, 10, 11) == pytest.approx(0.0, abs=1e-15)
