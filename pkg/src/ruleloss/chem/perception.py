"""Graph assembly: Kekule assignment, implicit hydrogens, ring and aromaticity perception."""

from __future__ import annotations

from dataclasses import dataclass

from .elements import ELEMENTS, allowed_valences
from .molecule import Atom, Bond, BondOrder, Molecule, SmilesSyntaxError, ValenceError, find_ring_bonds


@dataclass
class RawAtom:
    element: str
    charge: int = 0
    aromatic: bool = False
    hcount: int | None = None  # None: derive from the valence model

    @property
    def is_dummy(self) -> bool:
        return self.element == "*"


def assemble(
    raw_atoms: list[RawAtom],
    raw_bonds: list[tuple[int, int, BondOrder]],
    source: str = "",
) -> Molecule:
    """Turn parsed atoms and bonds into a validated :class:`Molecule`."""
    n = len(raw_atoms)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, (a, b, _) in enumerate(raw_bonds):
        adj[a].append((b, k))
        adj[b].append((a, k))

    kekule = _kekulize(raw_atoms, raw_bonds, adj)
    hcounts = []
    for i, atom in enumerate(raw_atoms):
        if atom.is_dummy:
            hcounts.append(0)
            continue
        bond_sum = sum(kekule[k] for _, k in adj[i])
        allowed = allowed_valences(atom.element, atom.charge)
        if atom.hcount is None:
            fits = [v for v in allowed if v >= bond_sum]
            if not fits:
                raise ValenceError(f"no valence of {atom.element} fits bond order sum {bond_sum}")
            hcounts.append(fits[0] - bond_sum)
        else:
            if bond_sum + atom.hcount not in allowed:
                raise ValenceError(
                    f"[{atom.element}] with {atom.hcount} H and charge {atom.charge}"
                    f" has bond order sum {bond_sum}"
                )
            hcounts.append(atom.hcount)

    ring = find_ring_bonds(n, [(a, b) for a, b, _ in raw_bonds])
    atoms = [
        Atom(a.element, a.charge, False, h) for a, h in zip(raw_atoms, hcounts)
    ]
    bonds = [
        Bond(a, b, BondOrder(kekule[k]), k in ring, kekule[k])
        for k, (a, b, _) in enumerate(raw_bonds)
    ]
    arom_atoms, arom_bonds = perceive_aromaticity(atoms, bonds, adj)
    atoms = [
        Atom(a.element, a.charge, i in arom_atoms, a.hcount) for i, a in enumerate(atoms)
    ]
    bonds = [
        Bond(b.a, b.b, BondOrder.AROMATIC, b.in_ring, b.kekule) if k in arom_bonds else b
        for k, b in enumerate(bonds)
    ]
    mol = Molecule(tuple(atoms), tuple(bonds), source)
    mol.validate()
    return mol


def _kekulize(
    raw_atoms: list[RawAtom],
    raw_bonds: list[tuple[int, int, BondOrder]],
    adj: list[list[tuple[int, int]]],
) -> list[int]:
    orders = [1 if o is BondOrder.AROMATIC else int(o) for _, _, o in raw_bonds]
    needs: set[int] = set()
    for i, atom in enumerate(raw_atoms):
        if not atom.aromatic:
            continue
        sigma = sum(orders[k] for _, k in adj[i])
        allowed = allowed_valences(atom.element, atom.charge)
        if atom.hcount is None:
            with_double = [v for v in allowed if v >= sigma + 1]
            if with_double and with_double[0] == allowed[0]:
                needs.add(i)
                atom.hcount = allowed[0] - sigma - 1
            elif sigma in allowed:
                atom.hcount = 0
            elif with_double:
                needs.add(i)
                atom.hcount = with_double[0] - sigma - 1
            else:
                raise ValenceError(f"aromatic {atom.element} cannot carry {sigma} bonds")
        else:
            total = sigma + atom.hcount
            if total + 1 in allowed:
                needs.add(i)
            elif total not in allowed:
                raise ValenceError(f"aromatic [{atom.element}] has impossible valence {total}")

    for k, (a, b, o) in enumerate(raw_bonds):
        if o is BondOrder.AROMATIC and not (raw_atoms[a].aromatic and raw_atoms[b].aromatic):
            raise SmilesSyntaxError("aromatic bond between non-aromatic atoms")

    candidates: dict[int, list[tuple[int, int]]] = {
        i: [
            (j, k)
            for j, k in adj[i]
            if j in needs and raw_bonds[k][2] is BondOrder.AROMATIC
        ]
        for i in needs
    }
    matched: dict[int, int] = {}

    def solve() -> bool:
        free = [i for i in candidates if i not in matched]
        if not free:
            return True
        # most constrained atom first keeps the search shallow
        best = min(free, key=lambda i: (sum(1 for j, _ in candidates[i] if j not in matched), i))
        for j, k in candidates[best]:
            if j in matched:
                continue
            matched[best] = k
            matched[j] = k
            if solve():
                return True
            del matched[best]
            del matched[j]
        return False

    if not solve():
        raise ValenceError("cannot assign a Kekule structure to the aromatic system")
    for k in set(matched.values()):
        orders[k] = 2
    return orders


def small_rings(
    n_atoms: int, bonds: list[Bond], adj: list[list[tuple[int, int]]], max_size: int = 6
) -> list[tuple[tuple[int, ...], frozenset[int]]]:
    """All simple cycles up to ``max_size`` atoms, as (atoms, bond indices)."""
    found: dict[frozenset[int], tuple[int, ...]] = {}
    for start in range(n_atoms):
        stack = [(start, (start,), ())]
        while stack:
            node, path, path_bonds = stack.pop()
            for nb, k in adj[node]:
                if not bonds[k].in_ring or k in path_bonds:
                    continue
                if nb == start and len(path) >= 3:
                    key = frozenset(path_bonds + (k,))
                    found.setdefault(key, path)
                elif nb > start and nb not in path and len(path) < max_size:
                    stack.append((nb, path + (nb,), path_bonds + (k,)))
    return sorted(((atoms, key) for key, atoms in found.items()), key=lambda r: sorted(r[0]))


def _pi_electrons(atom: Atom, degree: int) -> int | None:
    """Lone-pair contribution of a ring atom without a double bond."""
    el, q = atom.element, atom.charge
    if el in ("N", "P") and q == 0 and degree + atom.hcount == 3:
        return 2
    if el in ("O", "S") and q == 0 and degree + atom.hcount == 2:
        return 2
    if el == "C" and q == -1:
        return 2
    if el == "B" and q == 0 and degree + atom.hcount == 3:
        return 0
    return None


def perceive_aromaticity(
    atoms: list[Atom], bonds: list[Bond], adj: list[list[tuple[int, int]]]
) -> tuple[set[int], set[int]]:
    """Mark 5- and 6-membered rings with six pi electrons as aromatic.

    Works on the Kekule form; fused rings are resolved iteratively so that a
    double bond into an already aromatic neighbor ring counts as in-system.
    """
    rings = [r for r in small_rings(len(atoms), bonds, adj) if len(r[0]) in (5, 6)]
    arom_atoms: set[int] = set()
    arom_bonds: set[int] = set()
    done: set[int] = set()
    changed = True
    while changed:
        changed = False
        for idx, (ring_atoms, ring_bonds) in enumerate(rings):
            if idx in done:
                continue
            members = set(ring_atoms)
            electrons = 0
            ok = True
            for i in ring_atoms:
                if atoms[i].element not in ELEMENTS:
                    ok = False
                    break
                multiple = [(j, k) for j, k in adj[i] if bonds[k].kekule >= 2]
                if len(multiple) > 1 or any(bonds[k].kekule == 3 for _, k in multiple):
                    ok = False
                    break
                if multiple:
                    j, k = multiple[0]
                    if k in ring_bonds or (j in members and bonds[k].in_ring):
                        electrons += 1
                    elif k in arom_bonds:
                        electrons += 1
                    else:
                        ok = False
                        break
                else:
                    pe = _pi_electrons(atoms[i], len(adj[i]))
                    if pe is None:
                        ok = False
                        break
                    electrons += pe
            if ok and electrons == 6:
                done.add(idx)
                arom_atoms |= members
                arom_bonds |= ring_bonds
                changed = True
    return arom_atoms, arom_bonds
