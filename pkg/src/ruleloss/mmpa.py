"""Single-cut matched molecular pairs, transformation rules and rule files."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .chem.canon import canonical_smiles
from .chem.descriptors import atom_counts
from .chem.elements import ELEMENT_ORDER, ELEMENTS
from .chem.molecule import Atom, Bond, BondOrder, Molecule
from .chem.smiles import parse_smiles

RULE_FORMAT_VERSION = 1
DEFAULT_MAX_HEAVY_ATOMS = 13

FRAGMENT_KIND = "fragment"
ELEMENT_KIND = "element"


class EmptyRuleSet(Exception):
    """No rule survived filtering. A signal rather than a failure."""


class FormatError(ValueError):
    pass


class InvariantViolation(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Fragmentation:
    core: str
    variable: str
    cut_bond: tuple[int, int]


@dataclass(frozen=True, order=True)
class MatchedPair:
    core: str
    frag_a: str
    frag_b: str
    mol_a_id: int
    mol_b_id: int
    delta_p: float

    def flipped(self) -> MatchedPair:
        return MatchedPair(self.core, self.frag_b, self.frag_a, self.mol_b_id, self.mol_a_id, -self.delta_p)


@dataclass(frozen=True)
class Rule:
    frag_a: str
    frag_b: str
    delta_mean: float
    delta_std: float
    count: int

    def reversed(self) -> Rule:
        return Rule(self.frag_b, self.frag_a, -self.delta_mean, self.delta_std, self.count)

    def check(self) -> None:
        if self.count < 1:
            raise InvariantViolation(f"rule {self.frag_a}>>{self.frag_b} has count {self.count}")
        if not (math.isfinite(self.delta_mean) and math.isfinite(self.delta_std)):
            raise InvariantViolation(f"rule {self.frag_a}>>{self.frag_b} has non-finite statistics")
        if self.delta_std < 0:
            raise InvariantViolation(f"rule {self.frag_a}>>{self.frag_b} has negative std")
        if not self.frag_a < self.frag_b:
            raise InvariantViolation(f"rule fragments not in canonical order: {self.frag_a!r}, {self.frag_b!r}")


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...]
    fragment_index: Mapping[str, int]
    provenance: Mapping = field(default_factory=dict)
    kind: str = FRAGMENT_KIND

    def __len__(self) -> int:
        return len(self.rules)

    def check(self) -> None:
        keys = [(r.frag_a, r.frag_b) for r in self.rules]
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise InvariantViolation("rules must be unique and sorted by (frag_a, frag_b)")
        for r in self.rules:
            r.check()
        used = {f for r in self.rules for f in (r.frag_a, r.frag_b)}
        if set(self.fragment_index) != used:
            raise InvariantViolation("fragment_index must cover exactly the rule fragments")
        if sorted(self.fragment_index.values()) != list(range(len(self.fragment_index))):
            raise InvariantViolation("fragment slots must be contiguous from 0")

    def slots(self, rule: Rule) -> tuple[int, int]:
        return self.fragment_index[rule.frag_a], self.fragment_index[rule.frag_b]

    def with_rules(self, rules: Sequence[Rule], **provenance_updates) -> RuleSet:
        """A copy with replaced rule statistics (same fragments and index)."""
        prov = dict(self.provenance)
        prov.update(provenance_updates)
        return RuleSet(tuple(rules), dict(self.fragment_index), prov, self.kind)

    def sha256(self) -> str:
        return hashlib.sha256(dumps_ruleset(self).encode()).hexdigest()


# ---------------------------------------------------------------------------
# fragmentation


def _side(m: Molecule, start: int, cut: int) -> list[int]:
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v, k in m.adjacency[u]:
            if k != cut and v not in seen:
                seen.add(v)
                stack.append(v)
    return sorted(seen)


def _fragment(m: Molecule, members: list[int], attach: int) -> Molecule:
    remap = {old: new for new, old in enumerate(members)}
    inside = set(members)
    atoms = [m.atoms[i] for i in members] + [Atom("*", 0, False, 0)]
    bonds = [
        Bond(remap[b.a], remap[b.b], b.order, b.in_ring, b.kekule)
        for b in m.bonds
        if b.a in inside and b.b in inside
    ]
    bonds.append(Bond(remap[attach], len(members), BondOrder.SINGLE, False, 1))
    return Molecule(tuple(atoms), tuple(bonds))


def enumerate_fragmentations(m: Molecule, max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS) -> list[Fragmentation]:
    """Every single cut of an acyclic single bond, in both orientations.

    The variable side must hold at most ``max_heavy_atoms`` heavy atoms.
    """
    if max_heavy_atoms < 1:
        raise ValueError("max_heavy_atoms must be >= 1")
    out: list[Fragmentation] = []
    for k, bond in enumerate(m.bonds):
        if bond.in_ring or bond.order is not BondOrder.SINGLE:
            continue
        if m.atoms[bond.a].is_dummy or m.atoms[bond.b].is_dummy:
            continue
        side_a = _side(m, bond.a, k)
        in_a = set(side_a)
        side_b = [i for i in range(len(m.atoms)) if i not in in_a]
        frag_a = canonical_smiles(_fragment(m, side_a, bond.a))
        frag_b = canonical_smiles(_fragment(m, side_b, bond.b))
        if len(side_a) <= max_heavy_atoms:
            out.append(Fragmentation(frag_b, frag_a, (bond.a, bond.b)))
        if len(side_b) <= max_heavy_atoms:
            out.append(Fragmentation(frag_a, frag_b, (bond.b, bond.a)))
    out.sort()
    return out


@lru_cache(maxsize=65536)
def fragment_keys(smiles: str, max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS) -> tuple[tuple[str, str], ...]:
    """Sorted (core, variable) pairs of a molecule, cached by SMILES text."""
    m = parse_smiles(smiles)
    return tuple(sorted((f.core, f.variable) for f in enumerate_fragmentations(m, max_heavy_atoms)))


def _molecule_key(m: Molecule | str) -> str:
    return m if isinstance(m, str) else canonical_smiles(m)


# ---------------------------------------------------------------------------
# matched pairs and rules


def extract_matched_pairs(
    dataset: Sequence[tuple[Molecule | str, float]],
    *,
    ids: Sequence[int] | None = None,
    max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS,
) -> list[MatchedPair]:
    """All matched pairs, one per (core, row pair), oriented so ``frag_a < frag_b``.

    ``ids`` gives the row id of each entry; defaults to positions.
    """
    ids = list(range(len(dataset))) if ids is None else list(ids)
    if len(ids) != len(dataset):
        raise ValueError("ids and dataset lengths differ")
    by_core: dict[str, set[tuple[str, int]]] = defaultdict(set)
    values: dict[int, float] = {}
    for row_id, (mol, value) in zip(ids, dataset):
        if not math.isfinite(value):
            raise ValueError(f"non-finite property for row {row_id}")
        values[row_id] = float(value)
        for core, variable in fragment_keys(_molecule_key(mol), max_heavy_atoms):
            by_core[core].add((variable, row_id))
    pairs: list[MatchedPair] = []
    for core in sorted(by_core):
        members = sorted(by_core[core])
        for (va, ra), (vb, rb) in itertools.combinations(members, 2):
            if va == vb or ra == rb:
                continue
            # members are sorted by fragment, so va < vb here
            pairs.append(MatchedPair(core, va, vb, ra, rb, values[ra] - values[rb]))
    pairs.sort()
    return pairs


def aggregate_rules(pairs: Iterable[MatchedPair]) -> list[Rule]:
    """Group pairs by canonical fragment order; population mean and std per group."""
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for p in pairs:
        if p.frag_a == p.frag_b:
            continue
        if p.frag_a < p.frag_b:
            groups[(p.frag_a, p.frag_b)].append(p.delta_p)
        else:
            groups[(p.frag_b, p.frag_a)].append(-p.delta_p)
    rules = []
    for (a, b), deltas in sorted(groups.items()):
        deltas.sort()  # order-independent summation
        n = len(deltas)
        mean = math.fsum(deltas) / n
        std = math.sqrt(math.fsum((d - mean) ** 2 for d in deltas) / n)
        rules.append(Rule(a, b, mean, std, n))
    return rules


def _index_for(rules: Sequence[Rule]) -> dict[str, int]:
    frags = sorted({f for r in rules for f in (r.frag_a, r.frag_b)})
    return {f: i for i, f in enumerate(frags)}


def filter_rules(
    rules: Sequence[Rule],
    std_max: float = 0.3,
    min_count: int = 10,
    provenance: Mapping | None = None,
) -> RuleSet:
    """Keep rules with ``delta_std <= std_max`` and ``count >= min_count``."""
    if std_max <= 0 or min_count < 1:
        raise ValueError("std_max must be > 0 and min_count >= 1")
    kept = tuple(sorted(
        (r for r in rules if r.delta_std <= std_max and r.count >= min_count),
        key=lambda r: (r.frag_a, r.frag_b),
    ))
    if not kept:
        raise EmptyRuleSet(f"no rule has std <= {std_max} and count >= {min_count}")
    prov = dict(provenance or {})
    prov.update(std_max=std_max, min_count=min_count)
    rs = RuleSet(kept, _index_for(kept), prov, FRAGMENT_KIND)
    rs.check()
    return rs


def mine_rules(
    molecules: Sequence[Molecule | str],
    targets: Sequence[float],
    ids: Sequence[int],
    *,
    std_max: float = 0.3,
    min_count: int = 10,
    max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS,
    dataset_sha256: str = "",
) -> RuleSet:
    """Extract, aggregate and filter rules from the given rows only."""
    keys = [_molecule_key(m) for m in molecules]
    pairs = extract_matched_pairs(list(zip(keys, targets)), ids=ids, max_heavy_atoms=max_heavy_atoms)
    provenance = {
        "source": "mined",
        "dataset_sha256": dataset_sha256,
        "train_ids": sorted(int(i) for i in ids),
        "molecule_keys": sorted(set(keys)),
        "max_heavy_atoms": max_heavy_atoms,
        "n_pairs": len(pairs),
    }
    return filter_rules(aggregate_rules(pairs), std_max, min_count, provenance)


def element_mass_rules(
    molecules: Sequence[Molecule],
    ids: Sequence[int],
    *,
    std_max: float = 0.3,
    min_count: int = 10,
    dataset_sha256: str = "",
) -> RuleSet:
    """The exact element-substitution rules for a molecular-weight target.

    Each pair of elements gives one rule whose delta is the mass difference;
    its count is the number of given molecules containing either element.
    """
    counts = np.array([atom_counts(m) for m in molecules]).reshape(len(molecules), len(ELEMENT_ORDER))
    present = counts > 0
    rules = []
    for a, b in itertools.combinations(sorted(ELEMENT_ORDER), 2):
        ia, ib = ELEMENT_ORDER.index(a), ELEMENT_ORDER.index(b)
        n = int(np.count_nonzero(present[:, ia] | present[:, ib]))
        if n == 0:
            continue
        rules.append(Rule(a, b, ELEMENTS[a].mass - ELEMENTS[b].mass, 0.0, n))
    kept = tuple(r for r in rules if r.delta_std <= std_max and r.count >= min_count)
    if not kept:
        raise EmptyRuleSet("no element rule survived filtering")
    used = {f for r in kept for f in (r.frag_a, r.frag_b)}
    order = [s for s in ELEMENT_ORDER if s in used]
    provenance = {
        "source": "element_masses",
        "dataset_sha256": dataset_sha256,
        "train_ids": sorted(int(i) for i in ids),
        "molecule_keys": sorted({canonical_smiles(m) for m in molecules}),
        "std_max": std_max,
        "min_count": min_count,
    }
    rs = RuleSet(kept, {s: i for i, s in enumerate(order)}, provenance, ELEMENT_KIND)
    rs.check()
    return rs


def fragment_counts(
    m: Molecule | str, index: Mapping[str, int], max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS
) -> np.ndarray:
    """Per slot, the number of cuts whose variable fragment is that slot's fragment."""
    out = np.zeros(len(index), dtype=np.float64)
    for _, variable in fragment_keys(_molecule_key(m), max_heavy_atoms):
        slot = index.get(variable)
        if slot is not None:
            out[slot] += 1
    return out


def fragment_count_vector(m: Molecule, rs: RuleSet) -> np.ndarray:
    if rs.kind == ELEMENT_KIND:
        full = atom_counts(m).astype(np.float64)
        out = np.zeros(len(rs.fragment_index))
        for sym, slot in rs.fragment_index.items():
            out[slot] = full[ELEMENT_ORDER.index(sym)]
        return out
    mhv = int(rs.provenance.get("max_heavy_atoms", DEFAULT_MAX_HEAVY_ATOMS))
    return fragment_counts(m, rs.fragment_index, mhv)


def fragment_vocabulary(
    molecules: Iterable[Molecule | str], max_heavy_atoms: int = DEFAULT_MAX_HEAVY_ATOMS
) -> list[str]:
    """Sorted set of all variable fragments occurring in ``molecules``."""
    vocab: set[str] = set()
    for m in molecules:
        vocab.update(v for _, v in fragment_keys(_molecule_key(m), max_heavy_atoms))
    return sorted(vocab)


# ---------------------------------------------------------------------------
# rule files


def dumps_ruleset(rs: RuleSet) -> str:
    header = {
        "format_version": RULE_FORMAT_VERSION,
        "kind": rs.kind,
        "fragment_index": dict(sorted(rs.fragment_index.items(), key=lambda kv: kv[1])),
        "provenance": dict(rs.provenance),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in rs.rules:
        lines.append(json.dumps(
            {"frag_a": r.frag_a, "frag_b": r.frag_b, "delta_mean": r.delta_mean,
             "delta_std": r.delta_std, "count": r.count},
            sort_keys=True,
        ))
    return "\n".join(lines) + "\n"


def loads_ruleset(text: str) -> RuleSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty rule file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON in rule file: {exc}") from exc
    if not isinstance(header, dict) or "provenance" not in header:
        raise FormatError("first line must be a header with provenance")
    if header.get("format_version") != RULE_FORMAT_VERSION:
        raise FormatError(f"unsupported rule format version {header.get('format_version')!r}")
    rules = []
    for rec in records:
        if not isinstance(rec, dict) or set(rec) != {"frag_a", "frag_b", "delta_mean", "delta_std", "count"}:
            raise FormatError(f"malformed rule record: {rec!r}")
        if not isinstance(rec["count"], int) or isinstance(rec["count"], bool):
            raise FormatError("rule count must be an integer")
        rules.append(Rule(str(rec["frag_a"]), str(rec["frag_b"]), float(rec["delta_mean"]),
                          float(rec["delta_std"]), rec["count"]))
    kind = header.get("kind", FRAGMENT_KIND)
    if kind not in (FRAGMENT_KIND, ELEMENT_KIND):
        raise FormatError(f"unknown rule set kind {kind!r}")
    index = header.get("fragment_index") or _index_for(rules)
    rs = RuleSet(tuple(rules), {str(k): int(v) for k, v in index.items()}, header["provenance"], kind)
    rs.check()
    return rs


def write_ruleset(rs: RuleSet, path: str | Path) -> None:
    Path(path).write_text(dumps_ruleset(rs), encoding="utf-8")


def read_ruleset(path: str | Path) -> RuleSet:
    return loads_ruleset(Path(path).read_text(encoding="utf-8"))
