"""Command-line entry point.

Exit codes: 0 ok, 2 bad input, 3 empty result, 4 leakage, 5 numeric failure,
6 corpus generation failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .chem.molecule import ChemError
from .mmpa import (
    DEFAULT_MAX_HEAVY_ATOMS,
    EmptyRuleSet,
    FormatError,
    RuleSet,
    element_mass_rules,
    mine_rules,
    read_ruleset,
    write_ruleset,
)
from .splits import (
    METHODS,
    Dataset,
    DatasetError,
    DegenerateSplit,
    NoCliffs,
    NoTestRows,
    SplitAssignment,
    make_split,
    mw_range_split,
)
from .synth import GenerationError, mw_corpus
from .theory import NoContexts, audit_trained_model, linear_correlation, rank_correlation
from .training import (
    FeatureLayout,
    LeakageError,
    NonFiniteLoss,
    RunRecord,
    TrainConfig,
    evaluate,
    linear_reference,
    load_trained,
    perturb_rules,
    rule_transfer_train,
    save_trained,
    summarize,
    train,
)

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_LEAKAGE, EXIT_NUMERIC, EXIT_GENERATION = 0, 2, 3, 4, 5, 6
METRICS_FORMAT_VERSION = 1
MAX_UNFILLED_FRACTION = 0.10

# The MW benchmark needs a faster optimizer than the general defaults: at
# lr 1e-4 with dropout the network is still far from converged when early
# stopping fires, and a patience shorter than one restart period stops on
# the post-restart bump rather than on a plateau.
MW_BENCH_DEFAULTS = {
    "feature_mode": "atom_counts",
    "lr": 3e-3,
    "dropout_p": 0.0,
    "early_stop_patience": 20,
    "max_epochs": 300,
}
MW_NOISE_LEVELS = (0.0, 0.5, 1.0, 2.0, 4.0)
SENSITIVITY_PROBE_ROWS = 50


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config handling

_FLAG_NAMES = {"lam": "lambda"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with training settings; flags override it")
    group = p.add_argument_group("training settings")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + _FLAG_NAMES.get(f.name, f.name).replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, tuple):
            group.add_argument(flag, dest=f.name, type=int, nargs="+", default=None)
        else:
            group.add_argument(flag, dest=f.name, type=type(default), default=None)


def load_config(args: argparse.Namespace, base: dict | None = None) -> TrainConfig:
    """Defaults, then ``base``, then the JSON file, then explicit flags."""
    merged = dict(base or {})
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_INPUT, f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(EXIT_INPUT, "config must be a JSON object")
        merged.update(loaded)
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            merged[f.name] = value
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad config: {exc}") from exc


# ---------------------------------------------------------------------------
# file helpers


def _load_dataset(path: str) -> Dataset:
    try:
        return Dataset.load(path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read dataset {path}: {exc}") from exc


def _load_split(path: str, ds: Dataset) -> SplitAssignment:
    try:
        split = SplitAssignment.from_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read split {path}: {exc}") from exc
    try:
        split.check_against(ds)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    return split


def _load_rules(path: str | None) -> RuleSet | None:
    if path is None:
        return None
    try:
        return read_ruleset(path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read rules {path}: {exc}") from exc


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _csv(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields})
    return buf.getvalue()


def _epochs_csv(record: RunRecord) -> str:
    return _csv(record.epochs, ["epoch", "mse", "ssr", "total", "lambda", "val_rmse"])


def _runs_csv(records: Sequence[RunRecord], label: str = "") -> list[dict]:
    return [{"label": label, "seed": r.seed, "lambda": r.config["lam"], "test_rmse": r.test_rmse(),
             "test_r2": r.metrics["test"]["r2"], "best_epoch": r.best_epoch, "digest": r.digest()}
            for r in records]


RUN_FIELDS = ("label", "seed", "lambda", "test_rmse", "test_r2", "best_epoch", "digest")


def _metrics_json(record: RunRecord) -> dict:
    test = record.metrics.get("test", {})
    return {
        "format_version": METRICS_FORMAT_VERSION,
        "seed": record.seed,
        "lambda": record.config["lam"],
        "std_max": record.config["std_max"],
        "split": "test",
        "rmse": test.get("rmse"),
        "r2": test.get("r2"),
        "mode": record.config["loss_mode"],
        "ruleset_sha256": None if record.ruleset is None else record.ruleset["sha256"],
        "splits": record.metrics,
        "best_epoch": record.best_epoch,
        "record_digest": record.digest(),
    }


def _save_run(rundir: Path, trained, record: RunRecord) -> None:
    rundir.mkdir(parents=True, exist_ok=True)
    _write(rundir / "record.json", record.to_json() + "\n")
    _write_json(rundir / "metrics.json", _metrics_json(record))
    _write(rundir / "epochs.csv", _epochs_csv(record))
    save_trained(rundir / "checkpoint.json", trained, record)


def _rmse_summary(records: Sequence[RunRecord]) -> dict:
    return {
        "seeds": [r.seed for r in records],
        "test_rmse": summarize([r.test_rmse() for r in records]),
        "test_r2": summarize(r2) if (r2 := [r.metrics["test"]["r2"] for r in records
                                            if r.metrics["test"]["r2"] is not None]) else None,
    }


def _fmt(s: dict) -> str:
    return f"{s['mean']:.4f} +/- {s['std']:.4f}"


# ---------------------------------------------------------------------------
# parallel seed fan-out


def _train_job(job: tuple) -> tuple:
    ds, split, rs, cfg, seed, transfer, attest = job
    if transfer:
        return rule_transfer_train(ds, split, rs, cfg, seed, attest_disjoint=attest)
    return train(ds, split, rs, cfg, seed)


def _run_jobs(jobs: list[tuple], n_workers: int) -> list[tuple]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_train_job, jobs))


# ---------------------------------------------------------------------------
# commands


def cmd_extract_rules(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    split = _load_split(args.split, ds)
    ids = list(split.train_ids)
    if args.mode == "element":
        rs = element_mass_rules([ds.molecules[i] for i in ids], ids, std_max=args.std_max,
                                min_count=args.min_count, dataset_sha256=ds.sha256)
    else:
        rs = mine_rules([ds.canonical[i] for i in ids], ds.targets[ids], ids, std_max=args.std_max,
                        min_count=args.min_count, max_heavy_atoms=args.max_heavy_atoms,
                        dataset_sha256=ds.sha256)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ruleset(rs, out)
    stds = np.array([r.delta_std for r in rs.rules])
    print(f"{len(rs)} rules, max σ = {stds.max():.3f}")
    q = np.quantile(stds, [0.0, 0.25, 0.5, 0.75, 1.0])
    print("σ quantiles (0/25/50/75/100%): " + " ".join(f"{v:.3f}" for v in q))
    return EXIT_OK


_SPLIT_PARAMS = ("cutoff", "test_fraction", "mode", "fraction", "sim_min", "delta_min",
                 "train_max", "test_min", "test_max")


def cmd_split(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    params = {k: getattr(args, k) for k in _SPLIT_PARAMS if getattr(args, k) is not None}
    try:
        split = make_split(ds, args.method, args.seed, **params)
    except TypeError as exc:
        raise CliError(EXIT_INPUT, f"parameter not accepted by {args.method}: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_INPUT, f"cannot split: {exc}") from exc
    _write(Path(args.output), split.to_json() + "\n")
    print(f"{args.method}: train {len(split.train_ids)}, valid {len(split.valid_ids)}, test {len(split.test_ids)}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    split = _load_split(args.split, ds)
    rs = _load_rules(args.rules)
    cfg = load_config(args)
    if args.transfer and rs is None:
        raise CliError(EXIT_INPUT, "--transfer needs a rules file")
    jobs = [(ds, split, rs, cfg, seed, args.transfer, args.attest_disjoint) for seed in cfg.seeds]
    results = _run_jobs(jobs, args.jobs)
    out = Path(args.output)
    for trained, record in results:
        _save_run(out / f"seed_{record.seed}", trained, record)
        print(f"seed {record.seed}: test rmse {record.test_rmse():.4f}, best epoch {record.best_epoch}")
    records = [r for _, r in results]
    summary = {"format_version": METRICS_FORMAT_VERSION, "config": records[0].config | {"seeds": list(cfg.seeds)},
               **_rmse_summary(records)}
    _write_json(out / "summary.json", summary)
    _write(out / "runs.csv", _csv(_runs_csv(records, "train"), RUN_FIELDS))
    print(f"test rmse over {len(records)} seed(s): {_fmt(summary['test_rmse'])}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    split = _load_split(args.split, ds)
    try:
        trained = load_trained(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    ids = split.part(args.part)
    if not ids:
        raise CliError(EXIT_EMPTY, f"split part {args.part!r} is empty")
    m = evaluate(trained, ds, ids, args.part)
    _write_json(Path(args.output) / f"metrics_{args.part}.json",
                {"format_version": METRICS_FORMAT_VERSION, **m.as_dict()})
    print(f"{args.part}: rmse {m.rmse:.4f}, r2 {m.r2:.4f}, n {m.n}")
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    split = _load_split(args.split, ds)
    rs = _load_rules(args.rules)
    trained = load_trained(args.checkpoint)
    report = audit_trained_model(trained, ds, split, rs)
    _write_json(Path(args.output) / "audit.json", {"format_version": METRICS_FORMAT_VERSION, **report.as_dict()})
    print(f"e_hat {report.e_hat:.4f}; bound holds for {report.fraction_holding:.1%} of {len(report.per_rule)} rules")
    return EXIT_OK


def cmd_mw_bench(args: argparse.Namespace) -> int:
    out = Path(args.output)
    ds, report = mw_corpus(args.n_per_bin, args.mw_min, args.mw_max, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "dataset.csv")
    _write_json(out / "corpus.json", {
        "format_version": METRICS_FORMAT_VERSION, "n_molecules": len(ds), "dataset_sha256": ds.sha256,
        "n_bins": report.n_bins, "unfilled_bins": report.unfilled_bins, "attempts": report.attempts,
    })
    print(f"corpus: {len(ds)} molecules, {len(report.unfilled_bins)} unfilled bin(s) of {report.n_bins}")
    if report.unfilled_fraction > MAX_UNFILLED_FRACTION:
        raise GenerationError(f"{report.unfilled_fraction:.1%} of bins could not be filled")

    split = mw_range_split(ds, train_max=args.train_max, test_min=args.train_max, test_max=args.mw_max, seed=args.seed)
    _write(out / "split.json", split.to_json() + "\n")
    cfg = load_config(args, MW_BENCH_DEFAULTS)
    ids = list(split.train_ids)
    rs = element_mass_rules([ds.molecules[i] for i in ids], ids, std_max=cfg.std_max,
                            min_count=cfg.min_count, dataset_sha256=ds.sha256)
    write_ruleset(rs, out / "rules.jsonl")
    print(f"{len(rs)} rules, max σ = {max(r.delta_std for r in rs.rules):.3f}")

    layout = FeatureLayout.build(ds, cfg)
    _, linear = linear_reference(layout.transform(ds), ds.targets, split)

    noise_levels = sorted(set(args.noise_levels))
    jobs = [(ds, split, rs, cfg, s, False, False) for s in cfg.seeds]
    jobs += [(ds, split, None, cfg, s, False, False) for s in cfg.seeds]
    noisy_keys = [(lvl, s) for lvl in noise_levels if lvl != 0 for s in cfg.seeds]
    jobs += [(ds, split, perturb_rules(rs, lvl, s), cfg, s, False, False) for lvl, s in noisy_keys]
    results = _run_jobs(jobs, args.jobs)
    n = len(cfg.seeds)
    with_rules, baseline, noisy = results[:n], results[n:2 * n], results[2 * n:]
    for name, group in (("rules", with_rules), ("baseline", baseline)):
        for trained, record in group:
            _save_run(out / "runs" / name / f"seed_{record.seed}", trained, record)

    probe = ds.subset(split.test_ids[:SENSITIVITY_PROBE_ROWS])
    sensitivities = []
    for trained, _ in with_rules:
        grads = trained.model.input_sensitivities(trained.layout.transform(probe)).mean(axis=0)
        sensitivities.append({s: float(grads[i]) for s, i in trained.layout.slot_of.items()})

    noise_rows = []
    by_key = {(lvl, s): rec for (lvl, s), (_, rec) in zip(noisy_keys, noisy)}
    for lvl in noise_levels:
        for (_, rec0), seed in zip(with_rules, cfg.seeds):
            rec = rec0 if lvl == 0 else by_key[(lvl, seed)]
            noise_rows.append({"noise": lvl, "seed": seed, "test_rmse": rec.test_rmse(), "digest": rec.digest()})
    noise_means = [float(np.mean([r["test_rmse"] for r in noise_rows if r["noise"] == lvl])) for lvl in noise_levels]

    try:
        audit = audit_trained_model(with_rules[0][0], ds, split, rs).as_dict()
    except NoContexts as exc:
        audit = {"error": str(exc)}

    rules_summary = _rmse_summary([r for _, r in with_rules])
    base_summary = _rmse_summary([r for _, r in baseline])
    bench = {
        "format_version": METRICS_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "dataset_sha256": ds.sha256,
        "n_molecules": len(ds),
        "n_train": len(split.train_ids), "n_valid": len(split.valid_ids), "n_test": len(split.test_ids),
        "n_rules": len(rs),
        "max_rule_std": max(r.delta_std for r in rs.rules),
        "with_rules": rules_summary,
        "baseline": base_summary,
        "linear_reference": linear.as_dict(),
        "sensitivities": sensitivities,
        "noise_sweep": {
            "levels": noise_levels, "mean_test_rmse": noise_means, "runs": noise_rows,
            "pearson": linear_correlation(noise_levels, noise_means) if len(noise_levels) > 2 else None,
            "spearman": rank_correlation(noise_levels, noise_means) if len(noise_levels) > 2 else None,
        },
        "audit": audit,
    }
    _write_json(out / "bench.json", bench)
    _write(out / "noise_sweep.csv", _csv(noise_rows, ["noise", "seed", "test_rmse", "digest"]))
    _write(out / "runs.csv", _csv(_runs_csv([r for _, r in with_rules], "rules")
                                  + _runs_csv([r for _, r in baseline], "baseline"), RUN_FIELDS))
    table = [
        ("model", "test RMSE (mean +/- std)"),
        ("MLP, no rules", _fmt(base_summary["test_rmse"])),
        ("MLP, 66 exact rules", _fmt(rules_summary["test_rmse"])),
        ("linear regression", f"{linear.rmse:.4f}"),
    ]
    table += [(f"MLP, rule noise {lvl:g}", f"{m:.4f}") for lvl, m in zip(noise_levels, noise_means)]
    text = "\n".join(f"{a:<24} {b}" for a, b in table) + "\n"
    _write(out / "table.txt", text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ruleloss", description="Rule-regularized property regression.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-rules", help="mine rules from the training rows of a split")
    p.add_argument("dataset")
    p.add_argument("split")
    p.add_argument("--mode", choices=("fragment", "element"), default="fragment")
    p.add_argument("--std-max", type=float, default=0.3)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--max-heavy-atoms", type=int, default=DEFAULT_MAX_HEAVY_ATOMS)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_extract_rules)

    p = sub.add_parser("split", help="assign rows to train/valid/test")
    p.add_argument("dataset")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--mode")
    p.add_argument("--fraction", type=float)
    p.add_argument("--sim-min", type=float)
    p.add_argument("--delta-min", type=float)
    p.add_argument("--train-max", type=float)
    p.add_argument("--test-min", type=float)
    p.add_argument("--test-max", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("dataset")
    p.add_argument("split")
    p.add_argument("rules", nargs="?")
    p.add_argument("--transfer", action="store_true", help="rules were mined on other data")
    p.add_argument("--attest-disjoint", action="store_true",
                   help="vouch that transferred rules never saw the test molecules")
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split part")
    p.add_argument("dataset")
    p.add_argument("split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--part", choices=("train", "valid", "test"), default="test")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="check the residual-spread bound on a trained model")
    p.add_argument("dataset")
    p.add_argument("split")
    p.add_argument("rules")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("mw-bench", help="synthetic molecular-weight extrapolation benchmark")
    p.add_argument("--n-per-bin", type=int, default=5)
    p.add_argument("--mw-min", type=int, default=160)
    p.add_argument("--mw-max", type=int, default=700)
    p.add_argument("--train-max", type=float, default=600.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-levels", type=float, nargs="*", default=list(MW_NOISE_LEVELS))
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_mw_bench)
    return parser


_EXIT_FOR: list[tuple[tuple[type[BaseException], ...], int]] = [
    ((LeakageError,), EXIT_LEAKAGE),
    ((NonFiniteLoss, FloatingPointError), EXIT_NUMERIC),
    ((GenerationError,), EXIT_GENERATION),
    ((EmptyRuleSet, NoCliffs, NoTestRows, NoContexts, DegenerateSplit), EXIT_EMPTY),
    ((DatasetError, FormatError, ChemError), EXIT_INPUT),
]


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:
        for kinds, code in _EXIT_FOR:
            if isinstance(exc, kinds):
                print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
                if isinstance(exc, DatasetError):
                    for line, problem in exc.problems:
                        print(f"  line {line}: {problem}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
