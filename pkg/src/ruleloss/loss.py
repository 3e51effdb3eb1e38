"""Composite loss: MSE plus a penalty tying model slopes to rule deltas.

For a rule (a, b) with mean property change ``d`` the penalty residual at a
molecule with features ``x`` is

    discrete:  f(x + e_a) - f(x + e_b) - d - delta
    analytic:  df/dx_a(x) - df/dx_b(x) - d - delta

where ``delta = h . theta_rule`` is a learned per-rule correction computed
from the model's last hidden activation ``h``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .mmpa import RuleSet
from .nn.autodiff import DimensionMismatch, Tensor, as_tensor, parameter
from .nn.mlp import DropoutMasks, MlpRegressor

MODES = ("discrete", "analytic")
SCOPES = ("all_molecules", "containing_only")


class SlotOutOfRange(IndexError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.3
    mode: str = "discrete"
    rule_scope: str = "all_molecules"

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rule_scope not in SCOPES:
            raise ValueError(f"rule_scope must be one of {SCOPES}")


@dataclass(frozen=True)
class RuleTable:
    """Rules resolved to input slots of a particular feature layout."""

    slot_a: np.ndarray
    slot_b: np.ndarray
    delta_mean: np.ndarray
    keys: tuple[tuple[str, str], ...] = ()
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.delta_mean)

    @classmethod
    def from_ruleset(cls, rs: RuleSet, slot_of: Mapping[str, int]) -> RuleTable:
        """Map each rule's fragments to slots; rules with unknown fragments are skipped."""
        a, b, d, keys = [], [], [], []
        skipped = 0
        for r in rs.rules:
            if r.frag_a not in slot_of or r.frag_b not in slot_of:
                skipped += 1
                continue
            a.append(slot_of[r.frag_a])
            b.append(slot_of[r.frag_b])
            d.append(r.delta_mean)
            keys.append((r.frag_a, r.frag_b))
        return cls(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64),
                   np.array(d, dtype=np.float64), tuple(keys), skipped)

    @classmethod
    def from_arrays(cls, slot_a, slot_b, delta_mean) -> RuleTable:
        return cls(np.asarray(slot_a, dtype=np.int64), np.asarray(slot_b, dtype=np.int64),
                   np.asarray(delta_mean, dtype=np.float64))

    def check_slots(self, input_dim: int) -> None:
        for s in (self.slot_a, self.slot_b):
            if s.size and (s.min() < 0 or s.max() >= input_dim):
                raise SlotOutOfRange(f"rule slot outside the {input_dim}-wide input")


@dataclass
class AdaptiveUnit:
    """Per-rule vectors ``theta`` (rules x hidden width), zero at creation."""

    theta: Tensor

    @classmethod
    def zeros(cls, n_rules: int, width: int) -> AdaptiveUnit:
        return cls(parameter(np.zeros((n_rules, width))))

    @property
    def n_rules(self) -> int:
        return self.theta.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.theta]


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    mse_term: float
    ssr_term: float
    lam: float
    residuals: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"total": self.total, "mse": self.mse_term, "ssr": self.ssr_term, "lambda": self.lam}


def mse_loss(preds, targets) -> Tensor:
    preds = as_tensor(preds)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.data.size == 0:
        raise LengthMismatch(f"predictions {preds.shape} vs targets {targets.shape}")
    return (preds - targets).square().mean()


def adaptive_delta(h, rule_index, unit: AdaptiveUnit) -> Tensor:
    """``h . theta_r``. ``h`` may be one vector (H,) or a batch (B, H); ``rule_index`` an int or array."""
    h = as_tensor(h)
    if h.shape[-1] != unit.theta.shape[1]:
        raise DimensionMismatch(f"representation width {h.shape[-1]} vs adaptive width {unit.theta.shape[1]}")
    theta = unit.theta[rule_index]
    if h.ndim == 1 and theta.ndim == 1:
        return (h * theta).sum()
    if h.ndim == 1:
        return theta @ h.reshape(-1, 1)
    if theta.ndim == 1:
        return h @ theta.reshape(-1, 1)
    return theta @ h.T


def total_loss(mse_term: float, ssr_term: float, lam: float) -> LossBreakdown:
    return LossBreakdown(mse_term + lam * ssr_term, mse_term, ssr_term, lam)


def _scope_mask(x: np.ndarray, table: RuleTable, scope: str) -> np.ndarray | None:
    if scope == "all_molecules":
        return None
    return ((x[:, table.slot_a] > 0) | (x[:, table.slot_b] > 0)).T.astype(np.float64)


def _mean_square(residual: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return residual.square().mean()
    n = float(mask.sum())
    if n == 0:
        return (residual * 0.0).sum()
    return (residual.square() * mask).sum() * (1.0 / n)


def _rule_delta(trace_hidden: Tensor | None, n_base: int, table: RuleTable, unit: AdaptiveUnit | None):
    if unit is None or trace_hidden is None or unit.theta.shape[1] == 0:
        return 0.0
    h = trace_hidden if trace_hidden.shape[0] == n_base else trace_hidden[:n_base]
    return adaptive_delta(h, np.arange(len(table)), unit)


def forward_with_rules(
    model: MlpRegressor,
    x: np.ndarray,
    table: RuleTable | None,
    unit: AdaptiveUnit | None,
    mode: str = "discrete",
    masks: DropoutMasks | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Predictions at ``x`` and the per-(rule, molecule) residual matrix.

    Discrete mode evaluates each distinct rule slot once per molecule by
    stacking shifted copies of the batch below it, all sharing the batch's
    dropout masks. The residual is None when no penalty applies.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if table is None or len(table) == 0:
        y, _ = model.forward(x, masks)
        return y, None
    table.check_slots(model.input_dim)
    if mode == "discrete":
        slots, inverse = np.unique(np.concatenate([table.slot_a, table.slot_b]), return_inverse=True)
        shifted = [x]
        for s in slots:
            xs = x.copy()
            xs[:, s] += 1.0
            shifted.append(xs)
        big = np.concatenate(shifted, axis=0)
        rows = np.tile(np.arange(n), len(slots) + 1)
        y_all, trace = model.forward(big, None if masks is None else masks.take(rows))
        grid = y_all.reshape(len(slots) + 1, n)
        ia, ib = inverse[: len(table)] + 1, inverse[len(table):] + 1
        slope = grid[ia] - grid[ib]
        y = grid[0]
    else:
        y, trace = model.forward(x, masks)
        directions = np.zeros((len(table), model.input_dim))
        directions[np.arange(len(table)), table.slot_a] += 1.0
        directions[np.arange(len(table)), table.slot_b] -= 1.0
        slope = model.directional_derivative(trace, directions)
        if slope.shape[1] != n:  # a linear model's slope does not vary by row
            slope = slope + np.zeros((len(table), n))
    residual = slope - table.delta_mean.reshape(-1, 1) - _rule_delta(trace.hidden, n, table, unit)
    return y, residual


def ssr_penalty(
    model: MlpRegressor,
    x: np.ndarray,
    table: RuleTable,
    unit: AdaptiveUnit | None,
    cfg: LossConfig,
    masks: DropoutMasks | None = None,
) -> Tensor:
    """Mean squared rule residual over in-scope (molecule, rule) pairs."""
    _, residual = forward_with_rules(model, x, table, unit, cfg.mode, masks)
    if residual is None:
        return Tensor(0.0)
    return _mean_square(residual, _scope_mask(np.asarray(x, dtype=np.float64), table, cfg.rule_scope))


def composite_loss(
    model: MlpRegressor,
    x: np.ndarray,
    targets: np.ndarray,
    table: RuleTable | None,
    unit: AdaptiveUnit | None,
    cfg: LossConfig,
    masks: DropoutMasks | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Differentiable ``mse + lam * ssr`` and its breakdown.

    With ``lam == 0`` the rules are not evaluated at all, so the computation
    is exactly plain MSE training.
    """
    if cfg.lam == 0:
        table = None
    y, residual = forward_with_rules(model, x, table, unit, cfg.mode, masks)
    mse = mse_loss(y, targets)
    if residual is None:
        return mse, LossBreakdown(mse.item(), mse.item(), 0.0, cfg.lam)
    ssr = _mean_square(residual, _scope_mask(np.asarray(x, dtype=np.float64), table, cfg.rule_scope))
    total = mse + ssr * cfg.lam
    return total, LossBreakdown(total.item(), mse.item(), ssr.item(), cfg.lam, residual.data.copy())
