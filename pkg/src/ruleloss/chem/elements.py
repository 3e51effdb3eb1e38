"""Element table for the twelve supported elements.

Masses come from the versioned ``data/masses.csv`` resource so that every
run uses the same numbers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources

import numpy as np

MASS_TABLE_VERSION = 1


@dataclass(frozen=True)
class Element:
    symbol: str
    mass: float
    default_valences: tuple[int, ...]


def _load_table() -> dict[str, Element]:
    text = resources.files("ruleloss.chem").joinpath("data/masses.csv").read_text("utf-8")
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    table: dict[str, Element] = {}
    for row in csv.DictReader(io.StringIO("\n".join(lines))):
        valences = tuple(int(v) for v in row["valences"].split(";"))
        elem = Element(row["symbol"], float(row["mass"]), valences)
        if elem.symbol in table:
            raise ValueError(f"duplicate element {elem.symbol!r} in mass table")
        if elem.mass <= 0:
            raise ValueError(f"non-positive mass for {elem.symbol!r}")
        table[elem.symbol] = elem
    return table


ELEMENTS: dict[str, Element] = _load_table()

#: Slot order of atom-count vectors.
ELEMENT_ORDER: tuple[str, ...] = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "B", "Si")

MASS_VECTOR = np.array([ELEMENTS[s].mass for s in ELEMENT_ORDER])

ORGANIC_SUBSET = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"})
AROMATIC_SYMBOLS = frozenset({"b", "c", "n", "o", "p", "s"})

DUMMY = "*"


def mass(symbol: str) -> float:
    return ELEMENTS[symbol].mass


def allowed_valences(symbol: str, charge: int) -> tuple[int, ...]:
    """Valences permitted for an atom carrying ``charge``.

    Charged atoms follow the isoelectronic convention: N+ behaves like C,
    O- like F, B- like C, and a charged carbon loses one bond.
    """
    base = ELEMENTS[symbol].default_valences
    if charge == 0:
        return base
    if symbol in ("B",):
        shifted = tuple(v - charge for v in base)
    elif symbol in ("C", "Si"):
        shifted = tuple(v - abs(charge) for v in base)
    elif symbol == "H":
        shifted = (0,) if abs(charge) == 1 else ()
    else:
        shifted = tuple(v + charge for v in base)
    return tuple(v for v in shifted if v >= 0)
