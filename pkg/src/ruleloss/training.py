"""Training, evaluation, rule transfer and the benchmark sweeps."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .chem.descriptors import atom_counts
from .chem.elements import ELEMENT_ORDER
from .chem.fingerprint import morgan_fingerprint
from .loss import AdaptiveUnit, LossConfig, RuleTable, composite_loss
from .mmpa import (
    DEFAULT_MAX_HEAVY_ATOMS,
    ELEMENT_KIND,
    EmptyRuleSet,
    RuleSet,
    fragment_counts,
    fragment_vocabulary,
    mine_rules,
)
from .nn.autodiff import parameter
from .nn.mlp import MlpRegressor, load_checkpoint, save_checkpoint
from .nn.optim import AdamW, lr_schedule
from .rng import DEFAULT_SEEDS, Purpose, random_stream
from .splits import Dataset, SplitAssignment

FEATURE_MODES = ("fragment_counts", "atom_counts", "counts_plus_fingerprint")
RECORD_FORMAT_VERSION = 1


class LeakageError(Exception):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.3
    std_max: float = 0.3
    min_count: int = 10
    lr: float = 1e-4
    batch_size: int = 32
    dropout_p: float = 0.1
    clip_norm: float = 5.0
    weight_decay: float = 1e-5
    schedule_period: float = 15.0
    early_stop_patience: int = 10
    max_epochs: int = 300
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    feature_mode: str = "fragment_counts"
    hidden: tuple[int, ...] = (128, 128)
    loss_mode: str = "discrete"
    rule_scope: str = "all_molecules"
    max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS
    fp_bits: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        positive = ("std_max", "lr", "batch_size", "clip_norm", "schedule_period", "max_epochs",
                    "min_count", "early_stop_patience", "max_heavy_atoms", "fp_bits")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.weight_decay < 0 or not 0 <= self.dropout_p < 1:
            raise ValueError("lam and weight_decay must be >= 0 and dropout_p in [0, 1)")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        self.loss_config()  # validates mode and scope

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.loss_mode, self.rule_scope)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    r2: float
    n: int
    split: str

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "r2": None if math.isnan(self.r2) else self.r2, "n": self.n, "split": self.split}


def regression_metrics(pred: np.ndarray, target: np.ndarray, split: str = "test") -> Metrics:
    """RMSE and R^2, the latter against the evaluated targets' own mean (NaN if they are constant)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("need equally many non-zero predictions and targets")
    resid = pred - target
    ss_res = math.fsum(resid * resid)
    ss_tot = math.fsum((target - target.mean()) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return Metrics(math.sqrt(ss_res / pred.size), r2, int(pred.size), split)


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureLayout:
    """Input slots: count slots (rule targets) followed by auxiliary slots.

    The layout depends only on the molecules, never on the rule set, so runs
    with and without rules see identical inputs.
    """

    mode: str
    count_slots: tuple[str, ...]
    max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS
    fp_bits: int = 0

    @property
    def width(self) -> int:
        return len(self.count_slots) + self.fp_bits

    @property
    def slot_of(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.count_slots)}

    @classmethod
    def build(cls, ds: Dataset, cfg: TrainConfig) -> FeatureLayout:
        if cfg.feature_mode == "atom_counts":
            return cls("atom_counts", ELEMENT_ORDER)
        vocab = fragment_vocabulary(ds.canonical, cfg.max_heavy_atoms)
        fp_bits = cfg.fp_bits if cfg.feature_mode == "counts_plus_fingerprint" else 0
        return cls(cfg.feature_mode, tuple(vocab), cfg.max_heavy_atoms, fp_bits)

    def transform(self, ds: Dataset) -> np.ndarray:
        rows = []
        index = self.slot_of
        for mol, key in zip(ds.molecules, ds.canonical):
            if self.mode == "atom_counts":
                row = atom_counts(mol).astype(np.float64)
            else:
                row = fragment_counts(key, index, self.max_heavy_atoms)
            if self.fp_bits:
                row = np.concatenate([row, morgan_fingerprint(mol, 2, self.fp_bits).to_array()])
            rows.append(row)
        return np.array(rows, dtype=np.float64).reshape(len(ds), self.width)

    def rule_table(self, rs: RuleSet | None) -> RuleTable | None:
        if rs is None:
            return None
        if rs.kind == ELEMENT_KIND and self.mode != "atom_counts":
            raise ValueError("element rules need the atom_counts feature mode")
        return RuleTable.from_ruleset(rs, self.slot_of)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "count_slots": list(self.count_slots),
                "max_heavy_atoms": self.max_heavy_atoms, "fp_bits": self.fp_bits}

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureLayout:
        return cls(d["mode"], tuple(d["count_slots"]), int(d["max_heavy_atoms"]), int(d["fp_bits"]))


# ---------------------------------------------------------------------------
# records


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class RunRecord:
    config: dict
    seed: int
    dataset_sha256: str
    split_sha256: str
    ruleset: dict | None
    epochs: list[dict]
    metrics: dict[str, dict]
    best_epoch: int
    parameters_sha256: str
    notes: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def content(self) -> dict:
        """Everything except wall-clock time."""
        return {
            "format_version": RECORD_FORMAT_VERSION,
            "config": self.config,
            "seed": self.seed,
            "dataset_sha256": self.dataset_sha256,
            "split_sha256": self.split_sha256,
            "ruleset": self.ruleset,
            "epochs": self.epochs,
            "metrics": self.metrics,
            "best_epoch": self.best_epoch,
            "parameters_sha256": self.parameters_sha256,
            "notes": self.notes,
        }

    def digest(self) -> str:
        return _digest(self.content())

    def to_json(self) -> str:
        d = self.content()
        d["wall_clock_s"] = self.wall_clock_s
        d["digest"] = self.digest()
        return json.dumps(d, sort_keys=True, indent=1)

    def test_rmse(self) -> float:
        return self.metrics["test"]["rmse"]


@dataclass
class TrainedModel:
    model: MlpRegressor
    unit: AdaptiveUnit | None
    layout: FeatureLayout
    table: RuleTable | None

    def predict(self, ds: Dataset, ids: Sequence[int] | None = None) -> np.ndarray:
        x = self.layout.transform(ds if ids is None else ds.subset(ids))
        return self.model.predict(x)


def save_trained(path, trained: TrainedModel, record: RunRecord | None = None) -> None:
    """Checkpoint with everything needed to predict: weights, rule vectors, layout, rules."""
    table = trained.table
    extra = {
        "layout": trained.layout.to_dict(),
        "theta": None if trained.unit is None else trained.unit.theta.data.tolist(),
        "table": None if table is None else {
            "slot_a": table.slot_a.tolist(), "slot_b": table.slot_b.tolist(),
            "delta_mean": table.delta_mean.tolist(), "keys": [list(k) for k in table.keys],
            "skipped": table.skipped,
        },
        "record_digest": None if record is None else record.digest(),
    }
    save_checkpoint(path, trained.model, extra)


def load_trained(path) -> TrainedModel:
    model, extra = load_checkpoint(path)
    t = extra.get("table")
    table = None if t is None else RuleTable(
        np.array(t["slot_a"], dtype=np.int64), np.array(t["slot_b"], dtype=np.int64),
        np.array(t["delta_mean"], dtype=np.float64), tuple(tuple(k) for k in t["keys"]), int(t["skipped"]),
    )
    theta = extra.get("theta")
    unit = None if theta is None else AdaptiveUnit(parameter(np.array(theta).reshape(len(table), -1)))
    return TrainedModel(model, unit, FeatureLayout.from_dict(extra["layout"]), table)


# ---------------------------------------------------------------------------
# leakage guard


def check_leakage(ds: Dataset, split: SplitAssignment, rs: RuleSet | None, *, transfer: bool = False,
                  attest_disjoint: bool = False) -> None:
    """Refuse rule sets that saw the test split.

    Rules mined on this dataset must come from training rows only. Rules from
    elsewhere (``transfer=True``) must not contain any test molecule, checked
    by canonical SMILES when the provenance lists molecules, or else vouched
    for with ``attest_disjoint``.
    """
    if rs is None:
        return
    prov = rs.provenance
    same_dataset = prov.get("dataset_sha256") == ds.sha256
    test_keys = {ds.canonical[i] for i in split.test_ids}
    if same_dataset and not transfer:
        ids = prov.get("train_ids")
        if ids is None:
            raise LeakageError("rule provenance lacks train_ids for this dataset")
        extra = set(ids) - set(split.train_ids)
        if extra:
            raise LeakageError(f"rules were mined on {len(extra)} row(s) outside the training split")
        return
    if not same_dataset and not transfer:
        raise LeakageError("rule set comes from another dataset; use rule transfer")
    if same_dataset and set(prov.get("train_ids", ())) & set(split.test_ids):
        raise LeakageError("transferred rules were mined on test rows")
    keys = prov.get("molecule_keys")
    if keys is None:
        if not attest_disjoint:
            raise LeakageError("cannot verify transferred rules are test-free; attestation required")
        return
    overlap = test_keys & set(keys)
    if overlap:
        raise LeakageError(f"transferred rules were mined on {len(overlap)} test molecule(s)")


# ---------------------------------------------------------------------------
# training


def _split_arrays(x: np.ndarray, y: np.ndarray, ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(ids, dtype=np.int64)
    return x[idx], y[idx]


def _ruleset_summary(rs: RuleSet | None, table: RuleTable | None) -> dict | None:
    if rs is None:
        return None
    return {
        "sha256": rs.sha256(),
        "kind": rs.kind,
        "n_rules": len(rs),
        "n_used": len(table) if table is not None else 0,
        "n_skipped": table.skipped if table is not None else 0,
        "source": rs.provenance.get("source"),
        "dataset_sha256": rs.provenance.get("dataset_sha256"),
        "std_max": rs.provenance.get("std_max"),
        "min_count": rs.provenance.get("min_count"),
    }


def fit(
    x: np.ndarray,
    y: np.ndarray,
    split: SplitAssignment,
    table: RuleTable | None,
    cfg: TrainConfig,
    seed: int,
) -> tuple[MlpRegressor, AdaptiveUnit | None, list[dict], int]:
    """Mini-batch training on prepared features; returns the best-validation model."""
    loss_cfg = cfg.loss_config()
    if loss_cfg.lam == 0 or (table is not None and len(table) == 0):
        table = None
    model = MlpRegressor.init((x.shape[1], *cfg.hidden, 1), seed, cfg.dropout_p)
    x_tr, y_tr = _split_arrays(x, y, split.train_ids)
    x_va, y_va = _split_arrays(x, y, split.valid_ids)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation splits must be non-empty")
    model.set_normalization(x_tr, y_tr)
    unit = AdaptiveUnit.zeros(len(table), model.hidden_width if model.n_hidden else 0) if table is not None else None
    params = model.parameters() + (unit.parameters() if unit is not None else [])
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    n_batches = math.ceil(len(x_tr) / cfg.batch_size)
    best = (math.inf, -1, None)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.max_epochs):
        order = random_stream(seed, Purpose.SHUFFLE, epoch).permutation(len(x_tr))
        sums = np.zeros(3)
        for b in range(n_batches):
            rows = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_schedule(epoch + b / n_batches, cfg.lr, cfg.schedule_period)
            masks = model.dropout_masks(len(rows), seed, step)
            total, parts = composite_loss(model, x_tr[rows], y_tr[rows], table, unit, loss_cfg, masks)
            if not math.isfinite(parts.total):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {b}: mse={parts.mse_term}, ssr={parts.ssr_term}"
                )
            opt.zero_grad()
            total.backward()
            opt.step(lr)
            sums += len(rows) * np.array([parts.mse_term, parts.ssr_term, parts.total])
            step += 1
        mse, ssr, tot = sums / len(x_tr)
        val_rmse = float(np.sqrt(np.mean((model.predict(x_va) - y_va) ** 2)))
        if not math.isfinite(val_rmse):
            raise NonFiniteLoss(f"non-finite validation RMSE at epoch {epoch}")
        history.append({"epoch": epoch, "mse": mse, "ssr": ssr, "total": tot,
                        "lambda": loss_cfg.lam if table is not None else 0.0, "val_rmse": val_rmse})
        if val_rmse < best[0]:
            snapshot = [p.data.copy() for p in params]
            best = (val_rmse, epoch, snapshot)
        elif epoch - best[1] >= cfg.early_stop_patience:
            break
    for p, v in zip(params, best[2]):
        p.data[...] = v
    return model, unit, history, best[1]


def _parameters_sha(model: MlpRegressor, unit: AdaptiveUnit | None) -> str:
    h = hashlib.sha256()
    for p in model.parameters() + (unit.parameters() if unit is not None else []):
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _run(
    ds: Dataset,
    split: SplitAssignment,
    rs: RuleSet | None,
    cfg: TrainConfig,
    seed: int,
    notes: dict,
) -> tuple[TrainedModel, RunRecord]:
    started = time.perf_counter()
    split.check_against(ds)
    if cfg.lam == 0:
        rs = None
    effective = cfg.replace(lam=cfg.lam if rs is not None else 0.0)
    layout = FeatureLayout.build(ds, cfg)
    x = layout.transform(ds)
    y = ds.targets
    table = layout.rule_table(rs)
    model, unit, history, best_epoch = fit(x, y, split, table, effective, seed)
    trained = TrainedModel(model, unit, layout, table)
    metrics = {}
    for part in ("train", "valid", "test"):
        ids = split.part(part)
        if ids:
            xi, yi = _split_arrays(x, y, ids)
            metrics[part] = regression_metrics(model.predict(xi), yi, part).as_dict()
    config = effective.to_dict()
    config["seeds"] = [seed]
    record = RunRecord(
        config=config,
        seed=seed,
        dataset_sha256=ds.sha256,
        split_sha256=split.sha256(),
        ruleset=_ruleset_summary(rs, table),
        epochs=history,
        metrics=metrics,
        best_epoch=best_epoch,
        parameters_sha256=_parameters_sha(model, unit),
        notes=notes,
    )
    record.wall_clock_s = time.perf_counter() - started
    return trained, record


def train(
    ds: Dataset, split: SplitAssignment, rs: RuleSet | None, cfg: TrainConfig, seed: int | None = None
) -> tuple[TrainedModel, RunRecord]:
    """Train one model. Rules must have been mined on ``split``'s training rows."""
    check_leakage(ds, split, rs)
    return _run(ds, split, rs, cfg, cfg.seeds[0] if seed is None else seed, {})


def rule_transfer_train(
    ds: Dataset,
    split: SplitAssignment,
    external_rs: RuleSet,
    cfg: TrainConfig,
    seed: int | None = None,
    *,
    attest_disjoint: bool = False,
) -> tuple[TrainedModel, RunRecord]:
    """Train with rules mined elsewhere, after checking they never saw the test split."""
    check_leakage(ds, split, external_rs, transfer=True, attest_disjoint=attest_disjoint)
    notes = {"transfer": {"source_dataset_sha256": external_rs.provenance.get("dataset_sha256"),
                          "attested": attest_disjoint}}
    return _run(ds, split, external_rs, cfg, cfg.seeds[0] if seed is None else seed, notes)


def evaluate(trained: TrainedModel, ds: Dataset, ids: Sequence[int], split: str = "test") -> Metrics:
    if len(ids) == 0:
        raise ValueError("ids must be non-empty")
    return regression_metrics(trained.predict(ds, ids), ds.targets[np.asarray(ids)], split)


def linear_reference(x: np.ndarray, y: np.ndarray, split: SplitAssignment) -> tuple[np.ndarray, Metrics]:
    """Least-squares fit with intercept on train rows; test metrics."""
    x_tr, y_tr = _split_arrays(x, y, split.train_ids)
    design = np.hstack([x_tr, np.ones((len(x_tr), 1))])
    coef, *_ = np.linalg.lstsq(design, y_tr, rcond=None)
    x_te, y_te = _split_arrays(x, y, split.test_ids)
    pred = np.hstack([x_te, np.ones((len(x_te), 1))]) @ coef
    return coef, regression_metrics(pred, y_te, "test")


# ---------------------------------------------------------------------------
# sweeps


def perturb_rules(rs: RuleSet, noise: float, seed: int) -> RuleSet:
    """Add independent N(0, noise^2) draws to each rule's mean delta."""
    if noise == 0:
        return rs
    rng = random_stream(seed, Purpose.NOISE, int(round(noise * 1000)))
    draws = rng.normal(0.0, noise, size=len(rs))
    rules = [dataclasses.replace(r, delta_mean=r.delta_mean + float(e)) for r, e in zip(rs.rules, draws)]
    return rs.with_rules(rules, noise_sigma=noise, noise_seed=seed)


def mw_noise_sweep(
    ds: Dataset,
    split: SplitAssignment,
    rs: RuleSet,
    cfg: TrainConfig,
    noise_levels: Sequence[float] = (0.0, 0.5, 1.0, 2.0, 4.0),
) -> list[dict]:
    """Retrain with noisy rule deltas; one row per (noise, seed), sorted by noise."""
    rows = []
    for s in sorted(noise_levels):
        for seed in cfg.seeds:
            noisy = perturb_rules(rs, s, seed)
            _, rec = train(ds, split, noisy, cfg, seed)
            rows.append({"noise": s, "seed": seed, "test_rmse": rec.test_rmse(), "digest": rec.digest()})
    return rows


def subsample_split(split: SplitAssignment, fraction: float, seed: int) -> SplitAssignment:
    """Keep a seeded ``fraction`` of the training rows; valid and test unchanged."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return split
    train = np.array(split.train_ids)
    keep = random_stream(seed, Purpose.SHUFFLE, 1_000_000 + int(round(fraction * 1e4))).permutation(len(train))
    n = max(1, int(round(fraction * len(train))))
    params = dict(split.params, train_fraction=fraction, subsample_seed=seed)
    return SplitAssignment(train[keep[:n]].tolist(), split.valid_ids, split.test_ids, split.method,
                           split.seed, params, split.dataset_sha256)


def mine_for_split(
    ds: Dataset, split: SplitAssignment, cfg: TrainConfig, min_count: int | None = None
) -> RuleSet | None:
    """Mine rules on the training rows only; None when nothing survives filtering."""
    ids = list(split.train_ids)
    try:
        return mine_rules(
            [ds.canonical[i] for i in ids], ds.targets[ids], ids,
            std_max=cfg.std_max, min_count=cfg.min_count if min_count is None else min_count,
            max_heavy_atoms=cfg.max_heavy_atoms, dataset_sha256=ds.sha256,
        )
    except EmptyRuleSet:
        return None


def data_ratio_sweep(
    ds: Dataset,
    split: SplitAssignment,
    cfg: TrainConfig,
    fractions: Sequence[float],
    *,
    rules_for: callable | None = None,
) -> list[dict]:
    """Paired with-rules / no-rules runs per training fraction and seed.

    Rules are re-mined from each subsample via ``rules_for(ds, sub_split)``
    (default: :func:`mine_for_split` with the config thresholds).
    """
    rules_for = rules_for or (lambda d, s: mine_for_split(d, s, cfg))
    rows = []
    for fraction in sorted(fractions):
        for seed in cfg.seeds:
            sub = subsample_split(split, fraction, seed)
            rs = rules_for(ds, sub)
            _, with_rules = train(ds, sub, rs, cfg, seed)
            _, baseline = train(ds, sub, None, cfg, seed)
            rows.append({
                "fraction": fraction, "seed": seed,
                "n_rules": 0 if rs is None else len(rs),
                "rules_rmse": with_rules.test_rmse(), "baseline_rmse": baseline.test_rmse(),
            })
    return rows


def summarize(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}
