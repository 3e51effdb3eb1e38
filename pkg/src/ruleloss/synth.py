"""Seeded synthetic corpora.

``mw_corpus`` grows random acyclic, valence-valid molecules over the twelve
elements until every integer molecular-weight bin holds ``n_per_bin`` distinct
molecules. ``fragment_corpus`` decorates a few scaffolds with terminal
substituents and scores them with a hidden linear function of substituent
counts.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .chem.canon import canonical_smiles
from .chem.descriptors import molecular_weight
from .chem.elements import ELEMENTS
from .chem.molecule import Atom, Bond, BondOrder, Molecule
from .chem.smiles import parse_smiles
from .mmpa import fragment_keys
from .rng import Purpose, random_stream
from .splits import Dataset

# Light elements dominate; B, Si, P and I stay rare but present.
_GROWTH_ELEMENTS = ("C", "N", "O", "F", "S", "Cl", "Br", "P", "I", "B", "Si")
_GROWTH_WEIGHTS = np.array([0.52, 0.10, 0.12, 0.04, 0.04, 0.04, 0.03, 0.03, 0.03, 0.025, 0.025])
_GROWTH_CDF = np.cumsum(_GROWTH_WEIGHTS / _GROWTH_WEIGHTS.sum()).tolist()
_SEED_ELEMENTS = ("C", "N", "O", "S", "P", "B", "Si")
_SEED_CDF = np.cumsum([0.6, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05]).tolist()
_VALENCE = {s: ELEMENTS[s].default_valences[0] for s in _GROWTH_ELEMENTS}


class GenerationError(RuntimeError):
    pass


@dataclass
class CorpusReport:
    n_bins: int
    unfilled_bins: list[int] = field(default_factory=list)
    attempts: int = 0

    @property
    def unfilled_fraction(self) -> float:
        return len(self.unfilled_bins) / self.n_bins if self.n_bins else 0.0


def _grow(rng: np.random.Generator, mass_floor: float) -> Molecule | None:
    """Attach random atoms to a random tree until its weight reaches ``mass_floor``."""
    h = ELEMENTS["H"].mass
    elements: list[str] = []
    free: list[int] = []
    bonds: list[tuple[int, int, int]] = []
    mass = 0.0

    def add(symbol: str) -> None:
        nonlocal mass
        elements.append(symbol)
        free.append(_VALENCE[symbol])
        mass += ELEMENTS[symbol].mass + _VALENCE[symbol] * h

    def draw(symbols: tuple[str, ...], cdf: list[float]) -> str:
        return symbols[min(bisect.bisect_right(cdf, rng.random() * cdf[-1]), len(symbols) - 1)]

    add(draw(_SEED_ELEMENTS, _SEED_CDF))
    while mass < mass_floor:
        open_atoms = [i for i, f in enumerate(free) if f > 0]
        if not open_atoms:
            return None
        anchor = open_atoms[int(rng.integers(len(open_atoms)))]
        symbol = draw(_GROWTH_ELEMENTS, _GROWTH_CDF)
        if _VALENCE[symbol] == 1 and len(open_atoms) == 1 and free[anchor] == 1:
            symbol = "C"  # never cap the last open site
        order = 1
        if rng.random() < 0.08:
            order = int(min(free[anchor], _VALENCE[symbol], 3 if rng.random() < 0.2 else 2))
        add(symbol)
        new = len(elements) - 1
        free[anchor] -= order
        free[new] -= order
        mass -= 2 * order * h
        bonds.append((anchor, new, order))
    atoms = tuple(Atom(s, 0, False, f) for s, f in zip(elements, free))
    mol = Molecule(atoms, tuple(Bond(a, b, BondOrder(o), False, o) for a, b, o in bonds))
    mol.validate()
    return mol


def mw_corpus(
    n_per_bin: int = 5,
    mw_min: int = 160,
    mw_max: int = 700,
    seed: int = 0,
    max_attempts_per_bin: int = 2000,
) -> tuple[Dataset, CorpusReport]:
    """Molecules binned by ``floor(MW)`` over ``[mw_min, mw_max)``, targets = MW."""
    report = CorpusReport(mw_max - mw_min)
    smiles: list[str] = []
    targets: list[float] = []
    seen: set[str] = set()
    for b in range(mw_min, mw_max):
        rng = random_stream(seed, Purpose.SYNTH, b)
        filled = 0
        for _ in range(max_attempts_per_bin):
            if filled == n_per_bin:
                break
            report.attempts += 1
            # start low enough that the final atom can land inside the bin
            mol = _grow(rng, b - rng.uniform(0.0, 12.0))
            if mol is None:
                continue
            mw = molecular_weight(mol)
            if math.floor(mw) != b:
                continue
            text = canonical_smiles(mol)
            if text in seen:
                continue
            seen.add(text)
            smiles.append(text)
            targets.append(molecular_weight(parse_smiles(text)))
            filled += 1
        if filled < n_per_bin:
            report.unfilled_bins.append(b)
    return Dataset(tuple(smiles), np.array(targets), f"mw_{mw_min}_{mw_max}_s{seed}"), report


# ---------------------------------------------------------------------------
# fragment-count corpus

FRAGMENT_SCAFFOLDS = (
    "c1cc({0})cc({1})c1{2}",
    "C1CC({0})CC({1})C1{2}",
    "c1nc({0})cc({1})c1{2}",
    "{0}CC(={3})NC({1})C{2}",
)
SUBSTITUENTS = ("C", "O", "N", "F", "Cl", "Br")


def fragment_corpus(n: int = 500, seed: int = 0, noise: float = 0.2) -> tuple[Dataset, dict[str, float]]:
    """Decorated scaffolds with target = linear function of terminal-atom counts + noise.

    Returns the dataset and the hidden per-fragment weights (keyed by the
    canonical single-atom fragment string, as counted with ``max_heavy_atoms=1``).
    """
    rng = random_stream(seed, Purpose.SYNTH, 10_000)
    combos = []
    for scaffold in FRAGMENT_SCAFFOLDS:
        slots = scaffold.count("{") - (1 if "{3}" in scaffold else 0)
        for subs in itertools.product(SUBSTITUENTS, repeat=slots):
            combos.append(scaffold.format(*subs, "O"))
    chosen = sorted(rng.choice(len(combos), size=min(n, len(combos)), replace=False).tolist())
    smiles = [canonical_smiles(parse_smiles(combos[i])) for i in chosen]
    vocab = sorted({v for s in smiles for _, v in fragment_keys(s, 1)})
    weights = {f: float(w) for f, w in zip(vocab, rng.uniform(-3.0, 3.0, size=len(vocab)))}
    targets = []
    noise_draws = rng.normal(0.0, noise, size=len(smiles))
    for s, eps in zip(smiles, noise_draws):
        total = 2.0 + math.fsum(weights[v] for _, v in fragment_keys(s, 1))
        targets.append(total + eps)
    return Dataset(tuple(smiles), np.array(targets), f"fragments_s{seed}"), weights
