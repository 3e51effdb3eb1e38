"""SMILES reader for the organic subset plus bracket atoms.

Stereo markers (``@``, ``/``, ``\\``) are accepted and dropped. Isotopes
and elements outside the twelve-element table are rejected.
"""

from __future__ import annotations

import re

from .elements import AROMATIC_SYMBOLS, ELEMENTS
from .molecule import BondOrder, Molecule, SmilesSyntaxError, UnsupportedFeature
from .perception import RawAtom, assemble

_BOND_SYMBOLS = {
    "-": BondOrder.SINGLE,
    "=": BondOrder.DOUBLE,
    "#": BondOrder.TRIPLE,
    ":": BondOrder.AROMATIC,
    "/": BondOrder.SINGLE,
    "\\": BondOrder.SINGLE,
}

_TWO_LETTER_ORGANIC = ("Cl", "Br")
_CHIRAL_TAG = re.compile(r"@(?:@|(?:TH|AL|SP|TB|OH)\d+)?")

_TWO_LETTER_ELEMENTS = frozenset(
    "He Li Be Ne Na Mg Al Si Cl Ar Ca Sc Ti Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr"
    " Rb Sr Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd"
    " Tb Dy Ho Er Tm Yb Lu Hf Ta Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa"
    " Np Pu Am Cm Bk Cf Es Fm Md No Lr".split()
)


def parse_smiles(text: str, *, allow_dummy: bool = False) -> Molecule:
    """Parse ``text`` into a :class:`Molecule`.

    ``allow_dummy`` enables the ``[*]`` attachment marker used in fragment
    strings; ordinary molecule input must not contain it.
    """
    if not text or not text.strip():
        raise SmilesSyntaxError("empty SMILES")
    text = text.strip()
    atoms: list[RawAtom] = []
    bonds: list[tuple[int, int, BondOrder]] = []
    bond_keys: set[tuple[int, int]] = set()
    branch_stack: list[int] = []
    rings: dict[int, tuple[int, BondOrder | None]] = {}
    prev: int | None = None
    pending: BondOrder | None = None
    i = 0
    n = len(text)

    def add_bond(a: int, b: int, order: BondOrder | None) -> None:
        if a == b:
            raise SmilesSyntaxError(f"ring closure on itself at position {i}")
        key = (min(a, b), max(a, b))
        if key in bond_keys:
            raise SmilesSyntaxError(f"duplicate bond between atoms {a} and {b}")
        bond_keys.add(key)
        if order is None:
            order = (
                BondOrder.AROMATIC
                if atoms[a].aromatic and atoms[b].aromatic
                else BondOrder.SINGLE
            )
        bonds.append((a, b, order))

    def add_atom(atom: RawAtom) -> None:
        nonlocal prev, pending
        if atom.is_dummy and not allow_dummy:
            raise UnsupportedFeature("wildcard atoms are only allowed in fragment strings")
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending)
        elif pending is not None:
            raise SmilesSyntaxError(f"bond symbol without a preceding atom at position {i}")
        prev = idx
        pending = None

    while i < n:
        ch = text[i]
        if ch == "[":
            end = text.find("]", i)
            if end < 0:
                raise SmilesSyntaxError("unterminated bracket atom")
            add_atom(_parse_bracket(text[i + 1 : end]))
            i = end + 1
        elif ch in "BCNOPSFI" or ch in AROMATIC_SYMBOLS:
            two = text[i : i + 2]
            if two in _TWO_LETTER_ORGANIC:
                add_atom(RawAtom(two))
                i += 2
            elif ch in AROMATIC_SYMBOLS:
                add_atom(RawAtom(ch.upper(), aromatic=True))
                i += 1
            else:
                add_atom(RawAtom(ch))
                i += 1
        elif ch == "*":
            add_atom(RawAtom("*", hcount=0))
            i += 1
        elif ch in _BOND_SYMBOLS:
            if pending is not None:
                raise SmilesSyntaxError(f"two bond symbols in a row at position {i}")
            pending = _BOND_SYMBOLS[ch]
            i += 1
        elif ch == "$":
            raise UnsupportedFeature("quadruple bonds are not supported")
        elif ch == "(":
            if prev is None:
                raise SmilesSyntaxError("branch opened before any atom")
            branch_stack.append(prev)
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesSyntaxError(f"unbalanced ')' at position {i}")
            if pending is not None:
                raise SmilesSyntaxError(f"dangling bond symbol at position {i}")
            prev = branch_stack.pop()
            i += 1
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = text[i + 1 : i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesSyntaxError(f"bad ring number at position {i}")
                num = int(digits)
                i += 3
            else:
                num = int(ch)
                i += 1
            if prev is None:
                raise SmilesSyntaxError("ring closure before any atom")
            if num in rings:
                other, order = rings.pop(num)
                if order is not None and pending is not None and order != pending:
                    raise SmilesSyntaxError(f"conflicting ring bond orders for ring {num}")
                add_bond(other, prev, pending if pending is not None else order)
            else:
                rings[num] = (prev, pending)
            pending = None
        elif ch == ".":
            if pending is not None or branch_stack:
                raise SmilesSyntaxError(f"misplaced '.' at position {i}")
            prev = None
            i += 1
        else:
            raise SmilesSyntaxError(f"unknown symbol {ch!r} at position {i}")

    if branch_stack:
        raise SmilesSyntaxError("unbalanced '('")
    if rings:
        raise SmilesSyntaxError(f"unclosed ring bond(s) {sorted(rings)}")
    if pending is not None:
        raise SmilesSyntaxError("SMILES ends with a bond symbol")
    if not atoms:
        raise SmilesSyntaxError("no atoms")
    atoms, bonds = _fold_explicit_hydrogens(atoms, bonds)
    return assemble(atoms, bonds, text)


def _parse_bracket(body: str) -> RawAtom:
    if not body:
        raise SmilesSyntaxError("empty bracket atom")
    j = 0
    if body[0].isdigit():
        raise UnsupportedFeature("isotopes are not supported")
    if body[0] == "*":
        symbol, aromatic = "*", False
        j = 1
    elif body[:2] in ("se", "as"):
        raise UnsupportedFeature(f"unsupported aromatic element {body[:2]!r}")
    elif body[0] in AROMATIC_SYMBOLS:
        symbol, aromatic = body[0].upper(), True
        j = 1
    elif body[0].isupper():
        symbol = body[:2] if body[:2] in _TWO_LETTER_ELEMENTS else body[0]
        j = len(symbol)
        aromatic = False
        if symbol not in ELEMENTS:
            raise UnsupportedFeature(f"unsupported element {symbol!r}")
    else:
        raise SmilesSyntaxError(f"bad bracket atom [{body}]")

    stereo = _CHIRAL_TAG.match(body, j)
    if stereo:
        j = stereo.end()
    hcount = 0
    if j < len(body) and body[j] == "H":
        j += 1
        start = j
        while j < len(body) and body[j].isdigit():
            j += 1
        hcount = int(body[start:j]) if j > start else 1
    charge = 0
    if j < len(body) and body[j] in "+-":
        sign = 1 if body[j] == "+" else -1
        sym = body[j]
        j += 1
        start = j
        while j < len(body) and body[j].isdigit():
            j += 1
        if j > start:
            charge = sign * int(body[start:j])
        else:
            count = 1
            while j < len(body) and body[j] == sym:
                count += 1
                j += 1
            charge = sign * count
    if j < len(body) and body[j] == ":":
        j += 1
        while j < len(body) and body[j].isdigit():
            j += 1
    if j != len(body):
        raise SmilesSyntaxError(f"unparsed text in bracket atom [{body}]")
    if symbol == "*":
        return RawAtom("*", charge, False, 0)
    return RawAtom(symbol, charge, aromatic, hcount)


def _fold_explicit_hydrogens(
    atoms: list[RawAtom], bonds: list[tuple[int, int, BondOrder]]
) -> tuple[list[RawAtom], list[tuple[int, int, BondOrder]]]:
    """Merge bracket ``[H]`` atoms into the H count of their heavy neighbor."""
    hydrogens = {i for i, a in enumerate(atoms) if a.element == "H"}
    if not hydrogens:
        return atoms, bonds
    degree = {i: 0 for i in hydrogens}
    partner: dict[int, int] = {}
    for a, b, order in bonds:
        for h, other in ((a, b), (b, a)):
            if h in hydrogens:
                degree[h] += 1
                partner[h] = other
                if order is not BondOrder.SINGLE or other in hydrogens:
                    raise UnsupportedFeature("explicit hydrogen must be singly bonded to a heavy atom")
    for h in hydrogens:
        if degree[h] != 1 or atoms[h].charge != 0 or atoms[h].hcount:
            raise UnsupportedFeature("isolated or charged explicit hydrogens are not supported")
    for h, heavy in partner.items():
        target = atoms[heavy]
        if target.hcount is None:
            raise UnsupportedFeature("explicit [H] on an organic-subset atom; use a bracket atom")
        target.hcount += 1
    keep = [i for i in range(len(atoms)) if i not in hydrogens]
    remap = {old: new for new, old in enumerate(keep)}
    new_bonds = [
        (remap[a], remap[b], o) for a, b, o in bonds if a not in hydrogens and b not in hydrogens
    ]
    return [atoms[i] for i in keep], new_bonds
