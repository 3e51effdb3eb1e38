"""Molecular weight and element counts."""

from __future__ import annotations

import math

import numpy as np

from .elements import ELEMENT_ORDER, ELEMENTS
from .molecule import Molecule

_SLOT = {s: k for k, s in enumerate(ELEMENT_ORDER)}
H_SLOT = _SLOT["H"]


def atom_counts(m: Molecule) -> np.ndarray:
    """Per-element atom counts in ``ELEMENT_ORDER``; hydrogens include implicit ones."""
    counts = np.zeros(len(ELEMENT_ORDER), dtype=np.int64)
    for atom in m.atoms:
        if atom.is_dummy:
            continue
        counts[_SLOT[atom.element]] += 1
        counts[H_SLOT] += atom.hcount
    return counts


def molecular_weight(m: Molecule) -> float:
    h = ELEMENTS["H"].mass
    return math.fsum(
        ELEMENTS[a.element].mass + a.hcount * h for a in m.atoms if not a.is_dummy
    )
