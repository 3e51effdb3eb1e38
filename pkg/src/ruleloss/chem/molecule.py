"""Molecular graph with implicit hydrogens."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property

from .elements import DUMMY, ELEMENTS, allowed_valences


class ChemError(ValueError):
    """Base class for chemistry input errors."""


class SmilesSyntaxError(ChemError):
    pass


class ValenceError(ChemError):
    pass


class UnsupportedFeature(ChemError):
    pass


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> float:
        return 1.5 if self is BondOrder.AROMATIC else float(self.value)


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    hcount: int = 0

    @property
    def is_dummy(self) -> bool:
        return self.element == DUMMY


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder
    in_ring: bool = False
    # Integer order in one Kekule structure; equals ``order`` for non-aromatic bonds.
    kekule: int = 1

    def other(self, i: int) -> int:
        return self.b if i == self.a else self.a


@dataclass(frozen=True, eq=False)
class Molecule:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source_smiles: str = field(default="", compare=False)

    def __len__(self) -> int:
        return len(self.atoms)

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, the (neighbor index, bond index) pairs."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for k, bond in enumerate(self.bonds):
            adj[bond.a].append((bond.b, k))
            adj[bond.b].append((bond.a, k))
        return tuple(tuple(x) for x in adj)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    @property
    def heavy_atom_count(self) -> int:
        return sum(1 for a in self.atoms if not a.is_dummy)

    @property
    def has_dummy(self) -> bool:
        return any(a.is_dummy for a in self.atoms)

    def ring_atoms(self) -> frozenset[int]:
        return frozenset(i for b in self.bonds if b.in_ring for i in (b.a, b.b))

    def validate(self) -> None:
        """Raise if any structural or valence invariant is broken."""
        seen: set[tuple[int, int]] = set()
        n = len(self.atoms)
        for bond in self.bonds:
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise ValueError(f"bond endpoint out of range: {bond}")
            if bond.a == bond.b:
                raise ValueError(f"self bond on atom {bond.a}")
            key = (min(bond.a, bond.b), max(bond.a, bond.b))
            if key in seen:
                raise ValueError(f"duplicate bond {key}")
            seen.add(key)
        ring_bonds = find_ring_bonds(n, [(b.a, b.b) for b in self.bonds])
        for k, bond in enumerate(self.bonds):
            if bond.in_ring != (k in ring_bonds):
                raise ValueError(f"ring flag inconsistent on bond {k}")
        for i, atom in enumerate(self.atoms):
            if atom.is_dummy:
                continue
            total = sum(self.bonds[k].kekule for _, k in self.adjacency[i]) + atom.hcount
            if total not in allowed_valences(atom.element, atom.charge):
                raise ValenceError(
                    f"atom {i} ({atom.element}, charge {atom.charge}) has valence {total}"
                )


def find_ring_bonds(n_atoms: int, edges: list[tuple[int, int]]) -> frozenset[int]:
    """Indices of edges that lie on a cycle (i.e. are not bridges)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_atoms)]
    for k, (a, b) in enumerate(edges):
        adj[a].append((b, k))
        adj[b].append((a, k))
    disc = [-1] * n_atoms
    low = [0] * n_atoms
    bridges: set[int] = set()
    timer = 0
    for root in range(n_atoms):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            node, parent_edge, it = stack[-1]
            advanced = False
            for nb, k in it:
                if k == parent_edge:
                    continue
                if disc[nb] == -1:
                    disc[nb] = low[nb] = timer
                    timer += 1
                    stack.append((nb, k, iter(adj[nb])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nb])
            if advanced:
                continue
            stack.pop()
            if stack:
                up = stack[-1][0]
                low[up] = min(low[up], low[node])
                if low[node] > disc[up]:
                    bridges.add(parent_edge)
    return frozenset(k for k in range(len(edges)) if k not in bridges)


def is_known_element(symbol: str) -> bool:
    return symbol in ELEMENTS or symbol == DUMMY
