"""Datasets and the train/valid/test split regimes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .chem.canon import canonical_smiles
from .chem.fingerprint import bulk_tanimoto, fingerprint_matrix, morgan_fingerprint
from .chem.molecule import ChemError, Molecule
from .chem.scaffold import EmptyScaffold, murcko_scaffold
from .chem.smiles import parse_smiles
from .rng import Purpose, random_stream

SPLIT_FORMAT_VERSION = 1
METHODS = ("random_811", "scaffold_811", "butina_tail", "property_extreme", "activity_cliff", "mw_range")


class DatasetError(ValueError):
    """Malformed dataset; ``problems`` lists (line number, message)."""

    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        shown = "; ".join(f"line {ln}: {msg}" for ln, msg in problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        super().__init__(f"{len(problems)} bad row(s): {shown}{more}")


class DegenerateSplit(Exception):
    pass


class NoCliffs(Exception):
    pass


class NoTestRows(Exception):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    smiles: tuple[str, ...]
    targets: np.ndarray
    name: str = "dataset"

    def __post_init__(self) -> None:
        t = np.asarray(self.targets, dtype=np.float64)
        if t.shape != (len(self.smiles),):
            raise ValueError("one target per SMILES required")
        if not np.all(np.isfinite(t)):
            raise ValueError("targets must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "targets", t)

    def __len__(self) -> int:
        return len(self.smiles)

    @property
    def row_ids(self) -> range:
        return range(len(self.smiles))

    @cached_property
    def molecules(self) -> tuple[Molecule, ...]:
        return tuple(parse_smiles(s) for s in self.smiles)

    @cached_property
    def canonical(self) -> tuple[str, ...]:
        return tuple(canonical_smiles(m) for m in self.molecules)

    @cached_property
    def sha256(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["smiles", "target"])
        for s, t in zip(self.smiles, self.targets):
            writer.writerow([s, repr(float(t))])
        return buf.getvalue()

    def subset(self, ids: Sequence[int], name: str | None = None) -> Dataset:
        ids = list(ids)
        return Dataset(tuple(self.smiles[i] for i in ids), self.targets[ids], name or self.name)

    @classmethod
    def from_csv_text(cls, text: str, name: str = "dataset") -> Dataset:
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError([(1, "empty file")]) from None
        if [h.strip() for h in header] != ["smiles", "target"]:
            raise DatasetError([(1, f"header must be 'smiles,target', got {header!r}")])
        smiles, targets, problems = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                problems.append((line_no, f"expected 2 fields, got {len(row)}"))
                continue
            s, t = row[0].strip(), row[1].strip()
            try:
                value = float(t)
                if not math.isfinite(value):
                    raise ValueError
            except ValueError:
                problems.append((line_no, f"bad target {t!r}"))
                continue
            try:
                parse_smiles(s)
            except ChemError as exc:
                problems.append((line_no, f"{type(exc).__name__}: {exc}"))
                continue
            smiles.append(s)
            targets.append(value)
        if problems:
            raise DatasetError(problems)
        if not smiles:
            raise DatasetError([(1, "no data rows")])
        return cls(tuple(smiles), np.array(targets), name)

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        path = Path(path)
        return cls.from_csv_text(path.read_text(encoding="utf-8"), path.stem)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: tuple[int, ...]
    valid_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    method: str
    seed: int = 0
    params: dict = field(default_factory=dict)
    dataset_sha256: str = ""

    def __post_init__(self) -> None:
        for name in ("train_ids", "valid_ids", "test_ids"):
            object.__setattr__(self, name, tuple(sorted(int(i) for i in getattr(self, name))))
        tr, va, te = set(self.train_ids), set(self.valid_ids), set(self.test_ids)
        if tr & va or tr & te or va & te:
            raise ValueError("split parts overlap")
        if self.method not in METHODS:
            raise ValueError(f"unknown split method {self.method!r}")

    def part(self, name: str) -> tuple[int, ...]:
        return {"train": self.train_ids, "valid": self.valid_ids, "test": self.test_ids}[name]

    def to_dict(self) -> dict:
        return {
            "format_version": SPLIT_FORMAT_VERSION,
            "method": self.method,
            "seed": self.seed,
            "params": self.params,
            "dataset_sha256": self.dataset_sha256,
            "train_ids": list(self.train_ids),
            "valid_ids": list(self.valid_ids),
            "test_ids": list(self.test_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_json(cls, text: str) -> SplitAssignment:
        d = json.loads(text)
        if d.get("format_version") != SPLIT_FORMAT_VERSION:
            raise ValueError(f"unsupported split format version {d.get('format_version')!r}")
        return cls(d["train_ids"], d["valid_ids"], d["test_ids"], d["method"], d["seed"],
                   d.get("params", {}), d.get("dataset_sha256", ""))

    def check_against(self, ds: Dataset) -> None:
        n = len(ds)
        for i in (*self.train_ids, *self.valid_ids, *self.test_ids):
            if not 0 <= i < n:
                raise ValueError(f"split id {i} outside dataset of {n} rows")
        if self.dataset_sha256 and self.dataset_sha256 != ds.sha256:
            raise ValueError("split was built for a different dataset")


def _shuffle_train_valid(ids: Sequence[int], valid_share: float, seed: int, tag: int):
    ids = np.array(sorted(ids), dtype=np.int64)
    perm = random_stream(seed, Purpose.SPLIT, tag).permutation(len(ids))
    n_valid = int(round(len(ids) * valid_share))
    shuffled = ids[perm]
    return shuffled[n_valid:].tolist(), shuffled[:n_valid].tolist()


# ---------------------------------------------------------------------------
# Butina clustering


def butina_from_similarity(sim: np.ndarray, cutoff: float) -> list[tuple[int, tuple[int, ...]]]:
    """Leader clustering on a similarity matrix.

    Repeatedly the unassigned item with the most unassigned neighbors
    (similarity >= cutoff; ties to the lowest index) becomes a centroid and
    absorbs those neighbors. Returns (centroid, sorted members) per cluster.
    """
    if not 0 < cutoff < 1:
        raise ValueError("cutoff must lie in (0, 1)")
    n = sim.shape[0]
    adjacent = sim >= cutoff
    np.fill_diagonal(adjacent, False)
    neighbors = [np.flatnonzero(adjacent[i]) for i in range(n)]
    counts = adjacent.sum(axis=1).astype(np.int64)
    assigned = np.zeros(n, dtype=bool)
    clusters = []
    while not assigned.all():
        score = np.where(assigned, -1, counts)
        centroid = int(np.argmax(score))
        members = [centroid] + [int(j) for j in neighbors[centroid] if not assigned[j]]
        for j in members:
            assigned[j] = True
        for j in members:
            counts[neighbors[j]] -= 1
        clusters.append((centroid, tuple(sorted(members))))
    return clusters


def butina_cluster(fps, cutoff: float = 0.7) -> list[tuple[int, tuple[int, ...]]]:
    if len(fps) == 0:
        raise ValueError("need at least one fingerprint")
    x = fingerprint_matrix(list(fps))
    return butina_from_similarity(bulk_tanimoto(x), cutoff)


def _fingerprint_rows(ds: Dataset) -> np.ndarray:
    return fingerprint_matrix([morgan_fingerprint(m, 2, 2048) for m in ds.molecules])


# ---------------------------------------------------------------------------
# split regimes


def tail_clusters(clusters: Sequence[tuple[int, Sequence[int]]], min_size: float) -> list[int]:
    """Members of the smallest clusters (ties by centroid) until at least ``min_size`` rows."""
    out: list[int] = []
    for _, members in sorted(clusters, key=lambda c: (len(c[1]), c[0])):
        if len(out) >= min_size:
            break
        out.extend(members)
    return sorted(out)


def scaffold_ood_split(ds: Dataset, cutoff: float = 0.7, test_fraction: float = 0.10, seed: int = 0) -> SplitAssignment:
    """Hold out the least populated similarity clusters as the test set."""
    n = len(ds)
    if n < 10:
        raise ValueError("need at least 10 rows")
    clusters = butina_from_similarity(bulk_tanimoto(_fingerprint_rows(ds)), cutoff)
    if max(len(m) for _, m in clusters) > 0.9 * n:
        raise DegenerateSplit("one cluster holds more than 90% of rows")
    test = tail_clusters(clusters, test_fraction * n)
    rest = sorted(set(range(n)) - set(test))
    train, valid = _shuffle_train_valid(rest, 1 / 9, seed, 1)
    params = {"cutoff": cutoff, "test_fraction": test_fraction, "n_clusters": len(clusters)}
    return SplitAssignment(train, valid, test, "butina_tail", seed, params, ds.sha256)


def property_ood_split(ds: Dataset, mode: str = "top_extreme", fraction: float = 0.10, seed: int = 0) -> SplitAssignment:
    n = len(ds)
    ids = list(range(n))
    t = ds.targets
    high = sorted(ids, key=lambda i: (-t[i], i))
    low = sorted(ids, key=lambda i: (t[i], i))
    if mode == "top_extreme":
        test = high[: int(round(fraction * n))]
    elif mode == "both_extremes":
        k = int(round(fraction * n / 2))
        test = low[:k]
        test += [i for i in high if i not in set(test)][:k]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    rest = sorted(set(ids) - set(test))
    train, valid = _shuffle_train_valid(rest, 1 / 9, seed, 2)
    return SplitAssignment(train, valid, test, "property_extreme", seed,
                           {"mode": mode, "fraction": fraction}, ds.sha256)


def activity_cliff_split(ds: Dataset, sim_min: float = 0.75, delta_min: float = 1.0, seed: int = 0) -> SplitAssignment:
    """Greedy disjoint cliff pairs: lower-target member to train, the other to test."""
    n = len(ds)
    if n < 2:
        raise ValueError("need at least 2 rows")
    sim = bulk_tanimoto(_fingerprint_rows(ds))
    t = ds.targets
    ii, jj = np.nonzero(np.triu(sim > sim_min, k=1))
    candidates = [
        (-abs(t[i] - t[j]), int(i), int(j))
        for i, j in zip(ii, jj)
        if abs(t[i] - t[j]) > delta_min
    ]
    if not candidates:
        raise NoCliffs(f"no pair with similarity > {sim_min} and |delta| > {delta_min}")
    used: set[int] = set()
    cliff_train, test = [], []
    for _, i, j in sorted(candidates):
        if i in used or j in used:
            continue
        used.update((i, j))
        lo, hi = (i, j) if t[i] < t[j] else (j, i)
        cliff_train.append(lo)
        test.append(hi)
    rest = sorted(set(range(n)) - used)
    train, valid = _shuffle_train_valid(rest, 1 / 9, seed, 3)
    params = {"sim_min": sim_min, "delta_min": delta_min, "n_pairs": len(test)}
    return SplitAssignment(train + cliff_train, valid, test, "activity_cliff", seed, params, ds.sha256)


def mw_range_split(
    ds: Dataset, train_max: float = 600.0, test_min: float = 600.0, test_max: float = 700.0, seed: int = 0
) -> SplitAssignment:
    """Targets <= train_max go to train/valid 3:1; (test_min, test_max] is the test set."""
    t = ds.targets
    low = [i for i in range(len(ds)) if t[i] <= train_max]
    test = [i for i in range(len(ds)) if test_min < t[i] <= test_max and t[i] > train_max]
    if not test:
        raise NoTestRows(f"no rows with target in ({test_min}, {test_max}]")
    train, valid = _shuffle_train_valid(low, 1 / 4, seed, 4)
    params = {"train_max": train_max, "test_min": test_min, "test_max": test_max}
    return SplitAssignment(train, valid, test, "mw_range", seed, params, ds.sha256)


def _scaffold_key(m: Molecule) -> str:
    scaffold = murcko_scaffold(m)
    return "" if isinstance(scaffold, EmptyScaffold) else canonical_smiles(scaffold)


def random_scaffold_811(ds: Dataset, mode: str = "random", seed: int = 0) -> SplitAssignment:
    n = len(ds)
    if n < 10:
        raise ValueError("need at least 10 rows")
    n_train, n_valid = int(round(0.8 * n)), int(round(0.1 * n))
    if mode == "random":
        perm = random_stream(seed, Purpose.SPLIT, 5).permutation(n).tolist()
        train, valid, test = perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:]
        return SplitAssignment(train, valid, test, "random_811", seed, {"mode": mode}, ds.sha256)
    if mode != "murcko_scaffold":
        raise ValueError(f"unknown mode {mode!r}")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, m in enumerate(ds.molecules):
        groups[_scaffold_key(m)].append(i)
    train, valid, test = [], [], []
    for _, members in sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0])):
        if len(train) + len(members) <= n_train:
            train.extend(members)
        elif len(valid) + len(members) <= n_valid:
            valid.extend(members)
        else:
            test.extend(members)
    return SplitAssignment(train, valid, test, "scaffold_811", seed, {"mode": mode}, ds.sha256)


def make_split(ds: Dataset, method: str, seed: int = 0, **params) -> SplitAssignment:
    """Dispatch by method name."""
    if method == "random_811":
        return random_scaffold_811(ds, "random", seed)
    if method == "scaffold_811":
        return random_scaffold_811(ds, "murcko_scaffold", seed)
    if method == "butina_tail":
        return scaffold_ood_split(ds, seed=seed, **params)
    if method == "property_extreme":
        return property_ood_split(ds, seed=seed, **params)
    if method == "activity_cliff":
        return activity_cliff_split(ds, seed=seed, **params)
    if method == "mw_range":
        return mw_range_split(ds, seed=seed, **params)
    raise ValueError(f"unknown split method {method!r}")
