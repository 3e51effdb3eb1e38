"""Shared corpora for the test suite."""

from __future__ import annotations

import itertools

import numpy as np

from ruleloss.chem import canonical_smiles, parse_smiles
from ruleloss.mmpa import MatchedPair, enumerate_fragmentations
from ruleloss.rng import Purpose, random_stream
from ruleloss.synth import FRAGMENT_SCAFFOLDS, SUBSTITUENTS, _grow

HAND_SMILES = (
    "O", "C", "CCO", "OCC", "CC(=O)O", "c1ccccc1", "C1=CC=CC=C1", "c1ccncc1", "c1ccoc1", "c1cc[nH]c1",
    "CCc1ccccc1", "c1ccccc1CCc1ccccc1", "C1CCCCC1", "C1CC1C(F)(F)F", "ClCCBr", "CC(C)(C)I",
    "OC(=O)c1ccccc1O", "N#CC", "C=CC=C", "CS(=O)(=O)N", "OP(=O)(O)O", "B(O)O", "C[Si](C)(C)C",
    "c1ccc2ccccc2c1", "[NH4+]", "[O-]C=O", "CC[N+](C)(C)C", "FC(Cl)Br", "c1ccsc1", "C1CCOC1",
)


def random_corpus(seed: int, n: int = 60) -> list[str]:
    """Canonical SMILES: decorated scaffolds mixed with random acyclic molecules."""
    rng = random_stream(seed, Purpose.SYNTH, 77)
    out: set[str] = set()
    while len(out) < n:
        if rng.random() < 0.6:
            scaffold = FRAGMENT_SCAFFOLDS[int(rng.integers(len(FRAGMENT_SCAFFOLDS)))]
            subs = [SUBSTITUENTS[int(k)] for k in rng.integers(len(SUBSTITUENTS), size=3)]
            out.add(canonical_smiles(parse_smiles(scaffold.format(*subs, "O"))))
        else:
            mol = _grow(rng, float(rng.uniform(40, 160)))
            if mol is not None:
                out.add(canonical_smiles(mol))
    return sorted(out)


def random_targets(seed: int, n: int) -> np.ndarray:
    # a coarse grid so several pairs share identical deltas
    return np.round(random_stream(seed, Purpose.NOISE, 77).normal(0.0, 1.0, n), 1)


def brute_force_pairs(rows, max_heavy_atoms: int = 13) -> list[MatchedPair]:
    """Compare every fragmentation of every molecule with every other molecule's."""
    frags = [enumerate_fragmentations(parse_smiles(s), max_heavy_atoms) for s, _ in rows]
    found = set()
    for i, j in itertools.product(range(len(rows)), repeat=2):
        if i == j:
            continue
        for fi in frags[i]:
            for fj in frags[j]:
                if fi.core == fj.core and fi.variable < fj.variable:
                    found.add(MatchedPair(fi.core, fi.variable, fj.variable, i, j, rows[i][1] - rows[j][1]))
    return sorted(found)
