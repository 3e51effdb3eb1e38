from __future__ import annotations

import math

import numpy as np
import pytest

from ruleloss.nn.autodiff import DimensionMismatch, Tensor, concat, parameter
from ruleloss.nn.mlp import MlpRegressor, load_checkpoint, save_checkpoint
from ruleloss.nn.optim import AdamW, clip_grad_norm, lr_schedule


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def _check(build, *params, rtol=1e-6, atol=1e-8):
    out = build()
    out.backward()
    for p in params:
        expected = numeric_grad(lambda: build().item(), p.data)
        np.testing.assert_allclose(p.grad, expected, rtol=rtol, atol=atol)


def test_elementwise_ops_and_broadcasting():
    rng = np.random.default_rng(0)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4,)))
    c = parameter(rng.normal(size=(3, 1)))
    _check(lambda: ((a * b - c) + (b * 2.0 - a).square() - (-c)).sum(), a, b, c)


def test_matmul_relu_mean_reshape_transpose():
    rng = np.random.default_rng(1)
    x = parameter(rng.normal(size=(5, 3)))
    w = parameter(rng.normal(size=(3, 4)))
    _check(lambda: ((x @ w).relu().T.reshape(2, 10) * 0.5).mean(), x, w)


def test_batched_matmul():
    rng = np.random.default_rng(2)
    x = parameter(rng.normal(size=(2, 3, 4)))
    w = parameter(rng.normal(size=(4, 5)))
    _check(lambda: (x @ w).square().sum(), x, w)


def test_indexing_with_repeats_accumulates():
    x = parameter(np.arange(5.0))
    y = x[np.array([0, 0, 3])].sum()
    y.backward()
    assert x.grad.tolist() == [2.0, 0.0, 0.0, 1.0, 0.0]


def test_concat_and_axis_sum():
    rng = np.random.default_rng(3)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(1, 3)))
    _check(lambda: concat([a, b], axis=0).sum(axis=1).square().sum(), a, b)


def test_shared_subexpression():
    x = parameter(np.array([1.5, -2.0]))
    y = x * x
    (y + y * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 8 * x.data)


def test_backward_needs_scalar_or_seed():
    x = parameter(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.ones(3))
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


def test_deep_graph_is_iterative():
    x = parameter(np.array(1.0))
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


def test_matmul_shape_errors():
    with pytest.raises(DimensionMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 1)))
    with pytest.raises(DimensionMismatch):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 1)))


def _model(seed=0, dims=(4, 8, 6, 1), dropout=0.2):
    m = MlpRegressor.init(dims, seed, dropout)
    rng = np.random.default_rng(seed)
    m.set_normalization(rng.normal(3, 2, size=(20, dims[0])), rng.normal(10, 5, size=20))
    return m


def test_forward_shapes_and_dimension_check():
    m = _model()
    y, trace = m.forward(np.zeros((7, 4)))
    assert y.shape == (7,) and trace.hidden.shape == (7, 6) and len(trace.gates) == 2
    with pytest.raises(DimensionMismatch):
        m.forward(np.zeros((7, 5)))
    with pytest.raises(DimensionMismatch):
        MlpRegressor((4, 8, 2), [parameter(np.zeros((4, 8))), parameter(np.zeros((8, 2)))],
                     [parameter(np.zeros(8)), parameter(np.zeros(2))])


def test_init_is_seeded():
    a, b, c = MlpRegressor.init((3, 5, 1), 7), MlpRegressor.init((3, 5, 1), 7), MlpRegressor.init((3, 5, 1), 8)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.weights[0].data, c.weights[0].data)


def test_dropout_masks_are_addressable():
    m = _model()
    a, b = m.dropout_masks(5, 3, 11), m.dropout_masks(5, 3, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))
    keep = 1 - m.dropout_p
    assert set(np.unique(a.layers[0])) <= {0.0, 1 / keep}
    assert MlpRegressor.init((3, 5, 1), 0, 0.0).dropout_masks(5, 3, 11) is None


def test_input_sensitivities_match_finite_differences():
    m = _model(dropout=0.0)
    x = np.random.default_rng(4).normal(3, 2, size=(6, 4))
    sens = m.input_sensitivities(x)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-6
        fd = (m.predict(x + e) - m.predict(x - e)) / 2e-6
        np.testing.assert_allclose(sens[:, i], fd, rtol=1e-5, atol=1e-7)


def test_directional_derivative_matches_sensitivities():
    m = _model()
    x = np.random.default_rng(5).normal(3, 2, size=(6, 4))
    masks = m.dropout_masks(6, 0, 1)
    _, trace = m.forward(x, masks)
    directions = np.array([[1.0, -1.0, 0, 0], [0, 0, 1.0, 0]])
    d = m.directional_derivative(trace, directions).data
    # same quantity by reverse mode through the masked network
    xt = Tensor(x, requires_grad=True)
    y, _ = m.detached().forward(xt, masks)
    y.sum().backward()
    np.testing.assert_allclose(d, directions @ xt.grad.T, rtol=1e-10, atol=1e-10)


def test_checkpoint_round_trip(tmp_path):
    m = _model()
    save_checkpoint(tmp_path / "c.json", m, {"note": 1})
    back, extra = load_checkpoint(tmp_path / "c.json")
    x = np.random.default_rng(6).normal(size=(3, 4))
    assert np.array_equal(back.predict(x), m.predict(x)) and extra == {"note": 1}


def test_clipping_example():
    g = [np.array([6.0, 8.0])]
    clipped, norm = clip_grad_norm(g, 5.0)
    assert norm == 10.0
    assert math.isclose(float(np.linalg.norm(clipped[0])), 5.0)
    same, _ = clip_grad_norm([np.array([3.0, 4.0])], 5.0)
    assert same[0].tolist() == [3.0, 4.0]


def test_schedule_restarts():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(7.5) == pytest.approx(5e-5)
    assert lr_schedule(15) == 1e-4
    assert lr_schedule(14.999) < 1e-8
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_adam_first_step_matches_hand_computation():
    p = parameter(np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.01, clip_norm=None)
    p.grad = np.array([0.5, -0.25])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g) after decay
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.25]) * (1 / (1 + 1e-8 / 0.25 * 0.5))
    np.testing.assert_allclose(p.data, expected, rtol=1e-7)


def test_adam_clips_before_update():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(2))
    opt = AdamW([a], lr=0.1, clip_norm=5.0, weight_decay=0.0)
    ref = AdamW([b], lr=0.1, clip_norm=None, weight_decay=0.0)
    a.grad = np.array([60.0, 80.0])
    b.grad = np.array([3.0, 4.0])
    assert opt.step() == 100.0
    ref.step()
    np.testing.assert_allclose(a.data, b.data)


def test_adam_minimizes_quadratic():
    p = parameter(np.array([3.0, -4.0]))
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        opt.zero_grad()
        (p.square()).sum().backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-3
