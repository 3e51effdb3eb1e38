"""Empirical checks of the rule-spread bound sigma <= 2e.

If a model F has pointwise error at most e against the true property P, then
for any rule r the residual change (P(r(c)) - P(c)) - (F(r(c)) - F(c)) lies in
[-2e, 2e] for every context c. Its RMS, and therefore its standard deviation,
is at most 2e. Note that the spread of the raw change P(r(c)) - P(c) is *not*
bounded this way unless the model's own change F(r(c)) - F(c) is constant
across contexts, so the checks here target the residual.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .mmpa import ELEMENT_KIND, InvariantViolation, RuleSet, extract_matched_pairs
from .splits import Dataset, SplitAssignment
from .training import TrainedModel

REL_TOL = 1e-9


class NoContexts(Exception):
    pass


@dataclass(frozen=True)
class RuleContexts:
    """Per context c of one rule: P(c), P(r(c)), F(c), F(r(c))."""

    p: np.ndarray
    p_r: np.ndarray
    f: np.ndarray
    f_r: np.ndarray

    def __post_init__(self) -> None:
        arrays = [np.asarray(a, dtype=np.float64) for a in (self.p, self.p_r, self.f, self.f_r)]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1 or arrays[0].size == 0:
            raise ValueError("context arrays must be equal-length, non-empty vectors")
        for name, a in zip(("p", "p_r", "f", "f_r"), arrays):
            object.__setattr__(self, name, a)

    def residual(self) -> np.ndarray:
        return (self.p_r - self.p) - (self.f_r - self.f)


@dataclass(frozen=True)
class BoundInstance:
    rules: tuple[RuleContexts, ...]
    e: float

    def __post_init__(self) -> None:
        if not self.e >= 0:
            raise ValueError("error bound must be non-negative")
        tol = REL_TOL * max(self.e, 1.0)
        for k, ctx in enumerate(self.rules):
            worst = max(np.max(np.abs(ctx.p - ctx.f)), np.max(np.abs(ctx.p_r - ctx.f_r)))
            if worst > self.e + tol:
                raise InvariantViolation(f"rule {k}: |P - F| = {worst} exceeds e = {self.e}")


@dataclass(frozen=True)
class BoundReport:
    rule: int
    sigma_residual: float
    rms_residual: float
    bound: float
    holds: bool

    @property
    def slack(self) -> float:
        return self.bound - self.sigma_residual


def verify_sigma_bound(inst: BoundInstance) -> list[BoundReport]:
    """Per rule, check RMS and std of the residual change against 2e."""
    bound = 2.0 * inst.e
    tol = REL_TOL * max(bound, 1.0)
    out = []
    for k, ctx in enumerate(inst.rules):
        r = ctx.residual()
        sigma = float(np.std(r))
        rms = math.sqrt(math.fsum(r * r) / r.size)
        out.append(BoundReport(k, sigma, rms, bound, rms <= bound + tol and sigma <= bound + tol))
    return out


def random_instance(rng: np.random.Generator, n_rules: int = 5, max_contexts: int = 50) -> BoundInstance:
    """Random P values with F = P + uniform(-e, e) noise."""
    e = float(rng.uniform(0.01, 5.0))
    rules = []
    for _ in range(n_rules):
        n = int(rng.integers(1, max_contexts + 1))
        p = rng.normal(0.0, 10.0, n)
        p_r = p + rng.normal(rng.normal(0.0, 3.0), rng.uniform(0.0, 4.0), n)
        rules.append(RuleContexts(p, p_r, p + rng.uniform(-e, e, n), p_r + rng.uniform(-e, e, n)))
    return BoundInstance(tuple(rules), e)


def variance_below_mse(x: np.ndarray, a: float) -> tuple[float, float, bool]:
    """``Var[x] <= E[(x - a)^2]`` for a constant ``a``; returns both sides and the verdict.

    The inequality is the bias-variance identity E[(x - a)^2] = Var[x] + (E[x] - a)^2
    and needs ``a`` to be the same for every sample.
    """
    x = np.asarray(x, dtype=np.float64)
    var = float(np.var(x))
    mse = math.fsum((x - a) ** 2) / x.size
    return var, mse, var <= mse * (1 + REL_TOL) + 1e-300


# ---------------------------------------------------------------------------
# audits of trained models


@dataclass
class AuditReport:
    e_hat: float
    test_max_error: float
    per_rule: list[dict]

    @property
    def fraction_holding(self) -> float:
        return sum(r["holds"] for r in self.per_rule) / len(self.per_rule)

    def as_dict(self) -> dict:
        return {"e_hat": self.e_hat, "test_max_error": self.test_max_error,
                "fraction_holding": self.fraction_holding, "per_rule": self.per_rule}


def _element_contexts(trained: TrainedModel, x: np.ndarray, p: np.ndarray, rs: RuleSet):
    """Feature-space substitutions a -> b applied to test molecules containing b.

    For element rules the delta is exact, so P(r(c)) = P(c) + delta.
    """
    slot = trained.layout.slot_of
    out = []
    for k, rule in enumerate(rs.rules):
        ia, ib = slot[rule.frag_a], slot[rule.frag_b]
        rows = np.flatnonzero(x[:, ib] >= 1)
        if rows.size == 0:
            continue
        xc = x[rows]
        xr = xc.copy()
        xr[:, ia] += 1
        xr[:, ib] -= 1
        out.append((k, p[rows], p[rows] + rule.delta_mean, trained.model.predict(xc), trained.model.predict(xr)))
    return out


def _pair_contexts(trained: TrainedModel, ds: Dataset, ids: Sequence[int], rs: RuleSet):
    """Matched pairs inside ``ids`` whose fragments form a rule."""
    ids = list(ids)
    pred = dict(zip(ids, trained.predict(ds, ids)))
    mhv = int(rs.provenance.get("max_heavy_atoms", trained.layout.max_heavy_atoms))
    pairs = extract_matched_pairs([(ds.canonical[i], ds.targets[i]) for i in ids], ids=ids, max_heavy_atoms=mhv)
    index = {(r.frag_a, r.frag_b): k for k, r in enumerate(rs.rules)}
    grouped: dict[int, list] = {}
    for pair in pairs:
        k = index.get((pair.frag_a, pair.frag_b))
        if k is not None:
            grouped.setdefault(k, []).append(pair)
    out = []
    for k, plist in sorted(grouped.items()):
        # context c is the b-side molecule, r(c) the a-side one
        p = np.array([ds.targets[q.mol_b_id] for q in plist])
        p_r = np.array([ds.targets[q.mol_a_id] for q in plist])
        f = np.array([pred[q.mol_b_id] for q in plist])
        f_r = np.array([pred[q.mol_a_id] for q in plist])
        out.append((k, p, p_r, f, f_r))
    return out


def audit_trained_model(trained: TrainedModel, ds: Dataset, split: SplitAssignment, rs: RuleSet) -> AuditReport:
    """Residual spread per rule over test-set contexts, against twice the audited max error."""
    ids = list(split.test_ids)
    if not ids:
        raise NoContexts("empty test split")
    pred = trained.predict(ds, ids)
    test_max_error = float(np.max(np.abs(pred - ds.targets[ids])))
    if rs.kind == ELEMENT_KIND:
        x = trained.layout.transform(ds.subset(ids))
        contexts = _element_contexts(trained, x, ds.targets[ids], rs)
    else:
        contexts = _pair_contexts(trained, ds, ids, rs)
    if not contexts:
        raise NoContexts("no test contexts for any rule")
    e_hat = max(
        max(float(np.max(np.abs(p - f))), float(np.max(np.abs(p_r - f_r))))
        for _, p, p_r, f, f_r in contexts
    )
    inst = BoundInstance(tuple(RuleContexts(p, p_r, f, f_r) for _, p, p_r, f, f_r in contexts), e_hat)
    per_rule = []
    for (k, *_), rep in zip(contexts, verify_sigma_bound(inst)):
        rule = rs.rules[k]
        per_rule.append({
            "frag_a": rule.frag_a, "frag_b": rule.frag_b, "delta_std": rule.delta_std,
            "n_contexts": int(inst.rules[rep.rule].p.size), "sigma_residual": rep.sigma_residual,
            "bound": rep.bound, "slack": rep.slack, "holds": rep.holds,
        })
    return AuditReport(e_hat, test_max_error, per_rule)


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    return float(stats.spearmanr(x, y).statistic)


def linear_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    return float(stats.pearsonr(x, y).statistic)
