from __future__ import annotations

import numpy as np
import pytest

from ruleloss.mmpa import InvariantViolation, element_mass_rules
from ruleloss.splits import make_split
from ruleloss.synth import fragment_corpus, mw_corpus
from ruleloss.theory import (
    BoundInstance,
    NoContexts,
    RuleContexts,
    audit_trained_model,
    linear_correlation,
    random_instance,
    rank_correlation,
    variance_below_mse,
    verify_sigma_bound,
)
from ruleloss.training import TrainConfig, mine_for_split, train


def test_exact_model_has_zero_residual():
    p = np.array([1.0, 5.0, -2.0])
    inst = BoundInstance((RuleContexts(p, p + 3.0, p, p + 3.0),), 0.0)
    (rep,) = verify_sigma_bound(inst)
    assert rep.sigma_residual == 0.0 and rep.rms_residual == 0.0 and rep.holds


def test_constant_offset_model():
    p = np.array([0.0, 2.0, 4.0, 7.0])
    inst = BoundInstance((RuleContexts(p, p - 1.0, p + 0.5, p - 0.5),), 0.5)
    (rep,) = verify_sigma_bound(inst)
    assert rep.sigma_residual == 0.0 and rep.bound == 1.0 and rep.slack == 1.0


def test_extreme_errors_reach_the_bound():
    # residual alternates between +2e and -2e: std and RMS both equal 2e
    e = 0.75
    p = np.zeros(4)
    f = np.array([e, -e, e, -e])
    inst = BoundInstance((RuleContexts(p, p, f, -f),), e)
    (rep,) = verify_sigma_bound(inst)
    assert rep.sigma_residual == pytest.approx(2 * e, rel=1e-15) and rep.holds


def test_error_above_bound_rejected():
    p = np.zeros(3)
    with pytest.raises(InvariantViolation):
        BoundInstance((RuleContexts(p, p, p + 0.2, p),), 0.1)
    with pytest.raises(ValueError):
        BoundInstance((), -1.0)
    with pytest.raises(ValueError):
        RuleContexts(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("seed", range(20))
def test_random_instances_hold(seed):
    inst = random_instance(np.random.default_rng(seed))
    for rep in verify_sigma_bound(inst):
        assert rep.holds and rep.sigma_residual <= rep.rms_residual + 1e-12


def test_raw_change_spread_is_not_bounded():
    # the spread of P(r(c)) - P(c) alone can exceed 2e when the model's change varies
    p = np.array([0.0, 0.0])
    p_r = np.array([0.0, 10.0])
    ctx = RuleContexts(p, p_r, p, p_r)
    (rep,) = verify_sigma_bound(BoundInstance((ctx,), 0.0))
    assert np.std(p_r - p) == 5.0 and rep.holds


def test_variance_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    var, mse, ok = variance_below_mse(x, 2.5)
    assert (var, mse, ok) == (1.25, 1.25, True)
    var, mse, ok = variance_below_mse(x, 0.0)
    assert mse == 7.5 and ok


def test_variance_fails_for_sample_dependent_reference():
    # with a per-sample reference y = x the right side is zero while Var[x] > 0
    x = np.array([1.0, 2.0, 3.0])
    assert np.mean((x - x) ** 2) == 0.0 < np.var(x)


def test_correlations():
    assert rank_correlation([1, 2, 3, 4], [1, 4, 9, 16]) == pytest.approx(1.0)
    assert linear_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


CFG = TrainConfig(hidden=(16,), max_epochs=8, lr=3e-3, min_count=3, std_max=1.0, max_heavy_atoms=1,
                  early_stop_patience=4, seeds=(3,))


def test_fragment_audit():
    ds, _ = fragment_corpus(160, seed=1)
    split = make_split(ds, "random_811", 1)
    rs = mine_for_split(ds, split, CFG)
    trained, _ = train(ds, split, rs, CFG)
    report = audit_trained_model(trained, ds, split, rs)
    assert report.per_rule and report.e_hat <= report.test_max_error + 1e-12
    for row in report.per_rule:
        assert row["holds"] and row["bound"] == 2 * report.e_hat
        assert row["sigma_residual"] <= row["bound"] * (1 + 1e-9)
    assert report.fraction_holding == 1.0


def test_element_audit_and_no_contexts():
    ds, _ = mw_corpus(n_per_bin=1, mw_min=160, mw_max=260, seed=2)
    split = make_split(ds, "random_811", 0)
    mols = [ds.molecules[i] for i in split.train_ids]
    rs = element_mass_rules(mols, split.train_ids, min_count=1, dataset_sha256=ds.sha256)
    cfg = CFG.replace(feature_mode="atom_counts", min_count=1)
    trained, _ = train(ds, split, rs, cfg)
    report = audit_trained_model(trained, ds, split, rs)
    assert all(r["holds"] for r in report.per_rule)
    empty = make_split(ds, "random_811", 0)
    with pytest.raises(NoContexts):
        audit_trained_model(trained, ds, type(empty)(empty.train_ids, empty.valid_ids, (), empty.method,
                                                    empty.seed, empty.params, empty.dataset_sha256), rs)
