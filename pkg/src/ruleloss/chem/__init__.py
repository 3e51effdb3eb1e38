"""Chemistry primitives: SMILES I/O, descriptors, fingerprints, scaffolds."""

from __future__ import annotations

from .canon import canonical_ranks, canonical_smiles, random_smiles, write_smiles
from .descriptors import atom_counts, molecular_weight
from .elements import ELEMENT_ORDER, ELEMENTS, MASS_TABLE_VERSION, MASS_VECTOR, Element, mass
from .fingerprint import (
    Fingerprint,
    LengthMismatch,
    bulk_tanimoto,
    fingerprint_matrix,
    morgan_fingerprint,
    tanimoto,
)
from .molecule import (
    Atom,
    Bond,
    BondOrder,
    ChemError,
    Molecule,
    SmilesSyntaxError,
    UnsupportedFeature,
    ValenceError,
)
from .scaffold import EMPTY_SCAFFOLD, EmptyScaffold, murcko_scaffold
from .smiles import parse_smiles

__all__ = [
    "Atom", "Bond", "BondOrder", "ChemError", "ELEMENTS", "ELEMENT_ORDER", "EMPTY_SCAFFOLD",
    "Element", "EmptyScaffold", "Fingerprint", "LengthMismatch", "MASS_TABLE_VERSION",
    "MASS_VECTOR", "Molecule", "SmilesSyntaxError", "UnsupportedFeature", "ValenceError",
    "atom_counts", "bulk_tanimoto", "canonical_ranks", "canonical_smiles", "fingerprint_matrix",
    "mass", "molecular_weight", "morgan_fingerprint", "parse_smiles", "random_smiles",
    "murcko_scaffold", "tanimoto", "write_smiles", "canonicalize",
]


def canonicalize(text: str) -> str:
    """Parse and canonicalize a SMILES string."""
    return canonical_smiles(parse_smiles(text))
