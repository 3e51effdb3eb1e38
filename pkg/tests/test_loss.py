from __future__ import annotations

import numpy as np
import pytest

from ruleloss.chem import ELEMENT_ORDER, MASS_VECTOR
from ruleloss.loss import (
    AdaptiveUnit,
    LengthMismatch,
    LossConfig,
    RuleTable,
    SlotOutOfRange,
    adaptive_delta,
    composite_loss,
    forward_with_rules,
    mse_loss,
    ssr_penalty,
    total_loss,
)
from ruleloss.mmpa import Rule, filter_rules
from ruleloss.nn.autodiff import DimensionMismatch, parameter
from ruleloss.nn.mlp import MlpRegressor


def _linear_model(weights: np.ndarray, bias: float = 0.0) -> MlpRegressor:
    w = parameter(np.asarray(weights, dtype=float).reshape(-1, 1))
    return MlpRegressor((len(weights), 1), [w], [parameter(np.array([bias]))], 0.0)


def _mass_table() -> RuleTable:
    pairs = [(a, b) for a in range(12) for b in range(a + 1, 12)]
    return RuleTable.from_arrays([a for a, _ in pairs], [b for _, b in pairs],
                                 [MASS_VECTOR[a] - MASS_VECTOR[b] for a, b in pairs])


def test_mse_examples():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
    assert mse_loss(np.array([1.0, 2.0]), np.array([0.0, 1.0])).item() == 1.0
    assert mse_loss(np.array([3.0]), np.array([1.0])).item() == 4.0
    with pytest.raises(LengthMismatch):
        mse_loss(np.array([1.0]), np.array([1.0, 2.0]))
    with pytest.raises(LengthMismatch):
        mse_loss(np.array([]), np.array([]))


def test_adaptive_delta_examples():
    unit = AdaptiveUnit.zeros(3, 4)
    assert adaptive_delta(np.random.default_rng(0).normal(size=4), 1, unit).item() == 0.0
    unit.theta.data[2] = [0.5, -1.0, 2.0, 3.0]
    assert adaptive_delta(np.eye(4)[2], 2, unit).item() == 2.0
    with pytest.raises(DimensionMismatch):
        adaptive_delta(np.ones(5), 0, unit)


def test_adaptive_delta_gradient_is_representation():
    unit = AdaptiveUnit.zeros(2, 3)
    h = np.array([0.3, -1.2, 2.0])
    adaptive_delta(h, 1, unit).backward()
    np.testing.assert_allclose(unit.theta.grad, np.vstack([np.zeros(3), h]))


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 0.0).total == 1.0
    assert total_loss(1.0, 2.0, 0.3).total == pytest.approx(1.6, rel=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=-0.1)
    with pytest.raises(ValueError):
        LossConfig(mode="secant")
    with pytest.raises(ValueError):
        LossConfig(rule_scope="some")


@pytest.mark.parametrize("mode", ["discrete", "analytic"])
def test_rule_satisfying_linear_model_has_zero_penalty(mode):
    model = _linear_model(MASS_VECTOR, bias=1.0)
    x = np.random.default_rng(1).integers(0, 10, size=(8, 12)).astype(float)
    unit = AdaptiveUnit.zeros(66, 0)
    p = ssr_penalty(model, x, _mass_table(), unit, LossConfig(mode=mode))
    assert p.item() == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("mode", ["discrete", "analytic"])
def test_zero_model_penalty_is_delta_squared(mode):
    model = _linear_model(np.zeros(3))
    table = RuleTable.from_arrays([0], [2], [1.7])
    p = ssr_penalty(model, np.ones((4, 3)), table, None, LossConfig(mode=mode))
    assert p.item() == pytest.approx(1.7**2, rel=1e-12)


def test_modes_agree_on_random_linear_models():
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = int(rng.integers(2, 8))
        model = _linear_model(rng.normal(size=d), rng.normal())
        model.x_shift, model.x_scale = rng.normal(size=d), rng.uniform(0.2, 1.0, d)
        model.y_shift, model.y_scale = rng.normal(), rng.uniform(1, 5)
        n = int(rng.integers(1, 5))
        table = RuleTable.from_arrays(rng.integers(0, d, n), rng.integers(0, d, n), rng.normal(size=n))
        x = rng.normal(size=(6, d))
        _, r_disc = forward_with_rules(model, x, table, None, "discrete")
        _, r_anal = forward_with_rules(model, x, table, None, "analytic")
        np.testing.assert_allclose(r_disc.data, r_anal.data, rtol=1e-12, atol=1e-12)


def test_discrete_residual_matches_explicit_evaluation():
    rng = np.random.default_rng(3)
    model = MlpRegressor.init((5, 7, 6, 1), 0, 0.3)
    x = rng.integers(0, 4, size=(4, 5)).astype(float)
    table = RuleTable.from_arrays([0, 1, 3], [2, 0, 4], [0.5, -1.0, 2.0])
    unit = AdaptiveUnit.zeros(3, 6)
    unit.theta.data[...] = rng.normal(size=(3, 6))
    masks = model.dropout_masks(4, 1, 0)
    y, resid = forward_with_rules(model, x, table, unit, "discrete", masks)
    base_y, trace = model.forward(x, masks)
    np.testing.assert_allclose(y.data, base_y.data)
    for r in range(3):
        xa, xb = x.copy(), x.copy()
        xa[:, table.slot_a[r]] += 1
        xb[:, table.slot_b[r]] += 1
        fa = model.forward(xa, masks)[0].data
        fb = model.forward(xb, masks)[0].data
        delta = trace.hidden.data @ unit.theta.data[r]
        np.testing.assert_allclose(resid.data[r], fa - fb - table.delta_mean[r] - delta, rtol=1e-12, atol=1e-12)


def test_containing_only_scope():
    model = _linear_model(np.zeros(3))
    table = RuleTable.from_arrays([0], [1], [2.0])
    x = np.array([[1.0, 0, 0], [0, 0, 5.0], [0, 3.0, 0]])
    scoped = ssr_penalty(model, x, table, None, LossConfig(rule_scope="containing_only"))
    assert scoped.item() == pytest.approx(4.0)
    empty = ssr_penalty(model, np.array([[0, 0, 1.0]]), table, None, LossConfig(rule_scope="containing_only"))
    assert empty.item() == 0.0


def test_slot_out_of_range():
    model = _linear_model(np.zeros(3))
    with pytest.raises(SlotOutOfRange):
        ssr_penalty(model, np.ones((2, 3)), RuleTable.from_arrays([0], [3], [1.0]), None, LossConfig())


def test_zero_theta_penalty_independent_of_representation_width():
    model = MlpRegressor.init((4, 8, 1), 0, 0.0)
    x = np.random.default_rng(4).normal(size=(5, 4))
    table = RuleTable.from_arrays([0, 1], [2, 3], [0.1, -0.4])
    a = ssr_penalty(model, x, table, AdaptiveUnit.zeros(2, 8), LossConfig()).item()
    b = ssr_penalty(model, x, table, None, LossConfig()).item()
    assert a == b


def test_breakdown_identity_and_lambda_zero():
    model = MlpRegressor.init((4, 8, 1), 0, 0.0)
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=5)
    table = RuleTable.from_arrays([0], [1], [1.0])
    total, parts = composite_loss(model, x, y, table, AdaptiveUnit.zeros(1, 8), LossConfig(lam=0.3))
    assert parts.total == pytest.approx(parts.mse_term + 0.3 * parts.ssr_term, rel=1e-12)
    assert parts.ssr_term > 0 and parts.residuals.shape == (1, 5)
    zero, zparts = composite_loss(model, x, y, table, AdaptiveUnit.zeros(1, 8), LossConfig(lam=0.0))
    plain, _ = composite_loss(model, x, y, None, None, LossConfig(lam=0.3))
    assert zparts.ssr_term == 0.0 and zero.item() == plain.item() == mse_loss(model.forward(x)[0], y).item()


def test_rule_table_skips_unknown_fragments():
    rs = filter_rules([Rule("[*]A", "[*]B", 1.0, 0.0, 10), Rule("[*]A", "[*]C", 2.0, 0.0, 10)], 0.3, 10)
    table = RuleTable.from_ruleset(rs, {"[*]A": 0, "[*]B": 1})
    assert len(table) == 1 and table.skipped == 1 and table.keys == (("[*]A", "[*]B"),)


def test_element_table_matches_order():
    assert len(_mass_table()) == 66
    assert list(ELEMENT_ORDER).index("Si") < 12


@pytest.mark.parametrize("mode", ["discrete", "analytic"])
def test_penalty_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(7)
    model = MlpRegressor.init((4, 6, 5, 1), 1, 0.2)
    for b in model.biases:  # keep away from ReLU kinks at zero bias
        b.data[...] = rng.normal(0.0, 0.5, b.data.shape)
    x = rng.integers(0, 3, size=(5, 4)).astype(float)
    y = rng.normal(size=5)
    table = RuleTable.from_arrays([0, 2], [1, 3], [0.7, -0.2])
    unit = AdaptiveUnit.zeros(2, 5)
    unit.theta.data[...] = rng.normal(0.0, 0.3, (2, 5))
    masks = model.dropout_masks(5, 3, 0)
    cfg = LossConfig(lam=0.8, mode=mode)

    def loss():
        return composite_loss(model, x, y, table, unit, cfg, masks)[0]

    loss().backward()
    for p in model.parameters() + unit.parameters():
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + 1e-6
            hi = loss().item()
            flat[i] = old - 1e-6
            lo = loss().item()
            flat[i] = old
            fd[i] = (hi - lo) / 2e-6
        np.testing.assert_allclose(p.grad.reshape(-1), fd, rtol=1e-5, atol=1e-8)
