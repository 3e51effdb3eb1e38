"""Hashed circular (Morgan-style) fingerprints and Tanimoto similarity."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .molecule import Molecule


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    on_bits: frozenset[int]
    nbits: int = 2048
    radius: int = 2

    def to_array(self) -> np.ndarray:
        arr = np.zeros(self.nbits, dtype=np.uint8)
        arr[list(self.on_bits)] = 1
        return arr

    def __len__(self) -> int:
        return self.nbits


def _hash(payload: tuple) -> int:
    digest = hashlib.blake2b(repr(payload).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def morgan_identifiers(m: Molecule, radius: int = 2) -> set[int]:
    """Unfolded environment identifiers for every atom and radius."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    ring = m.ring_atoms()
    ids = [
        _hash((a.element, m.degree(i), a.hcount, a.charge, a.aromatic, i in ring))
        for i, a in enumerate(m.atoms)
    ]
    found = set(ids)
    for level in range(1, radius + 1):
        ids = [
            _hash((level, ids[i], tuple(sorted((int(m.bonds[k].order), ids[j]) for j, k in m.adjacency[i]))))
            for i in range(len(m.atoms))
        ]
        found.update(ids)
    return found


def morgan_fingerprint(m: Molecule, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    if nbits < 64 or nbits & (nbits - 1):
        raise ValueError("nbits must be a power of two >= 64")
    bits = frozenset(x % nbits for x in morgan_identifiers(m, radius))
    return Fingerprint(bits, nbits, radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.nbits != b.nbits:
        raise LengthMismatch(f"fingerprint lengths differ: {a.nbits} vs {b.nbits}")
    union = len(a.on_bits | b.on_bits)
    if union == 0:
        return 1.0
    return len(a.on_bits & b.on_bits) / union


def fingerprint_matrix(fps: Sequence[Fingerprint]) -> np.ndarray:
    if not fps:
        return np.zeros((0, 0), dtype=np.float32)
    nbits = fps[0].nbits
    if any(f.nbits != nbits for f in fps):
        raise LengthMismatch("fingerprints have mixed lengths")
    out = np.zeros((len(fps), nbits), dtype=np.float32)
    for i, f in enumerate(fps):
        out[i, list(f.on_bits)] = 1.0
    return out


def bulk_tanimoto(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Pairwise Tanimoto between rows of 0/1 matrices ``x`` and ``y``."""
    y = x if y is None else y
    if x.shape[1] != y.shape[1]:
        raise LengthMismatch("fingerprint lengths differ")
    # integer counts are exact in float32; divide in float64 so that e.g. 7/10
    # compares equal to the literal 0.7 at a cutoff
    inter = (x @ y.T).astype(np.float64)
    union = x.sum(axis=1, dtype=np.float64)[:, None] + y.sum(axis=1, dtype=np.float64)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 1.0)
