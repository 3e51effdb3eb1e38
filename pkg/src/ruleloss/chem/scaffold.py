"""Bemis-Murcko scaffolds: ring systems plus the linkers between them."""

from __future__ import annotations

from dataclasses import dataclass

from .molecule import Atom, Bond, Molecule


@dataclass(frozen=True)
class EmptyScaffold:
    """Returned for molecules without rings."""


EMPTY_SCAFFOLD = EmptyScaffold()


def murcko_scaffold(m: Molecule) -> Molecule | EmptyScaffold:
    """Strip terminal non-ring atoms until only rings and linkers remain.

    Atoms that lose a neighbor gain hydrogens so valences stay intact.
    """
    if not any(b.in_ring for b in m.bonds):
        return EMPTY_SCAFFOLD
    ring = m.ring_atoms()
    alive = [True] * len(m.atoms)
    degree = [m.degree(i) for i in range(len(m.atoms))]
    frontier = [i for i in range(len(m.atoms)) if degree[i] <= 1 and i not in ring]
    while frontier:
        i = frontier.pop()
        if not alive[i]:
            continue
        alive[i] = False
        for j, _ in m.adjacency[i]:
            if alive[j]:
                degree[j] -= 1
                if degree[j] <= 1 and j not in ring:
                    frontier.append(j)
    gained = [0] * len(m.atoms)
    for b in m.bonds:
        if alive[b.a] != alive[b.b]:
            gained[b.a if alive[b.a] else b.b] += b.kekule
    keep = [i for i in range(len(m.atoms)) if alive[i]]
    remap = {old: new for new, old in enumerate(keep)}
    atoms = tuple(
        Atom(m.atoms[i].element, m.atoms[i].charge, m.atoms[i].aromatic, m.atoms[i].hcount + gained[i])
        for i in keep
    )
    bonds = tuple(
        Bond(remap[b.a], remap[b.b], b.order, b.in_ring, b.kekule)
        for b in m.bonds
        if alive[b.a] and alive[b.b]
    )
    out = Molecule(atoms, bonds, m.source_smiles)
    out.validate()
    return out
