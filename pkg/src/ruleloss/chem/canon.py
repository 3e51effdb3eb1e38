"""Canonical atom ranking and SMILES writing."""

from __future__ import annotations

from collections import Counter
from collections.abc import Sequence

import numpy as np

from .elements import ORGANIC_SUBSET, allowed_valences
from .molecule import BondOrder, Molecule

_ELEMENT_RANK = {s: k for k, s in enumerate(("*", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "B", "Si", "H"))}


def _dense(keys: Sequence) -> list[int]:
    lookup = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [lookup[k] for k in keys]


def _refine(mol: Molecule, ranks: list[int]) -> list[int]:
    adj = mol.adjacency
    bonds = mol.bonds
    classes = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted((ranks[j], int(bonds[k].order)) for j, k in adj[i])))
            for i in range(len(ranks))
        ]
        new = _dense(keys)
        n_new = len(set(new))
        if n_new == classes:
            return new
        ranks, classes = new, n_new


def canonical_ranks(mol: Molecule) -> list[int]:
    """Unique atom ranks from iterative neighborhood refinement.

    Ties left after refinement are broken by individualizing the first atom
    of the lowest tied class and refining again.
    """
    ring_atoms = mol.ring_atoms()
    invariants = [
        (
            0 if a.is_dummy else 1,
            mol.degree(i),
            _ELEMENT_RANK[a.element],
            a.charge,
            a.hcount,
            a.aromatic,
            i in ring_atoms,
        )
        for i, a in enumerate(mol.atoms)
    ]
    ranks = _refine(mol, _dense(invariants))
    n = len(ranks)
    while len(set(ranks)) < n:
        counts = Counter(ranks)
        tied = min(r for r, c in counts.items() if c > 1)
        chosen = ranks.index(tied)
        ranks = [2 * r + (1 if r == tied and i != chosen else 0) for i, r in enumerate(ranks)]
        ranks = _refine(mol, _dense(ranks))
    return ranks


def _implied_hcount(mol: Molecule, i: int) -> int | None:
    """H count a reader would infer for atom ``i`` written without brackets."""
    atom = mol.atoms[i]
    allowed = allowed_valences(atom.element, 0)
    adj = mol.adjacency[i]
    if atom.aromatic:
        sigma = sum(
            1 if mol.bonds[k].order is BondOrder.AROMATIC else int(mol.bonds[k].order) for _, k in adj
        )
        with_double = [v for v in allowed if v >= sigma + 1]
        if with_double and with_double[0] == allowed[0]:
            return allowed[0] - sigma - 1
        if sigma in allowed:
            return 0
        if with_double:
            return with_double[0] - sigma - 1
        return None
    total = sum(int(mol.bonds[k].order) for _, k in adj)
    fits = [v for v in allowed if v >= total]
    return fits[0] - total if fits else None


def _atom_token(mol: Molecule, i: int) -> str:
    atom = mol.atoms[i]
    if atom.is_dummy:
        return "[*]"
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if atom.element in ORGANIC_SUBSET and atom.charge == 0 and _implied_hcount(mol, i) == atom.hcount:
        return symbol
    h = ""
    if atom.hcount:
        h = "H" if atom.hcount == 1 else f"H{atom.hcount}"
    q = ""
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        q = sign if abs(atom.charge) == 1 else f"{sign}{abs(atom.charge)}"
    return f"[{symbol}{h}{q}]"


def _bond_token(mol: Molecule, k: int) -> str:
    bond = mol.bonds[k]
    if bond.order is BondOrder.AROMATIC:
        return ""
    if bond.order is BondOrder.SINGLE:
        both_aromatic = mol.atoms[bond.a].aromatic and mol.atoms[bond.b].aromatic
        return "-" if both_aromatic else ""
    return "=" if bond.order is BondOrder.DOUBLE else "#"


def write_smiles(mol: Molecule, ranks: Sequence[int]) -> str:
    """Write ``mol`` as SMILES, traversing atoms in ``ranks`` order."""
    n = len(mol.atoms)
    adj = [sorted(nbrs, key=lambda jk: ranks[jk[0]]) for nbrs in mol.adjacency]
    visited = [False] * n
    children: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    ring_events: list[list[tuple[int, int, bool]]] = [[] for _ in range(n)]
    closure_bonds: set[int] = set()

    def explore(root: int) -> None:
        visited[root] = True
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            u, parent_bond, it = stack[-1]
            for v, k in it:
                if k == parent_bond:
                    continue
                if visited[v]:
                    if k not in closure_bonds:
                        closure_bonds.add(k)
                        ring_events[v].append((u, k, True))  # v opens
                        ring_events[u].append((v, k, False))  # u closes
                    continue
                visited[v] = True
                children[u].append((v, k))
                stack.append((v, k, iter(adj[v])))
                break
            else:
                stack.pop()

    roots = []
    for start in sorted(range(n), key=lambda i: ranks[i]):
        if not visited[start]:
            roots.append(start)
            explore(start)

    free_digits: list[int] = list(range(1, 100))
    digit_of: dict[int, int] = {}

    def ring_label(d: int) -> str:
        return str(d) if d < 10 else f"%{d}"

    def emit(root: int) -> str:
        out: list[str] = []
        # explicit stack of (atom, incoming bond token) and close-paren markers
        work: list[tuple[str, int, str]] = [("atom", root, "")]
        while work:
            kind, u, bond_tok = work.pop()
            if kind == "close":
                out.append(")")
                continue
            if kind == "open":
                out.append("(")
                continue
            out.append(bond_tok)
            out.append(_atom_token(mol, u))
            released = []
            closes = [(v, k) for v, k, opens in ring_events[u] if not opens]
            opens_ = [(v, k) for v, k, opens in ring_events[u] if opens]
            for v, k in sorted(closes, key=lambda vk: digit_of[vk[1]]):
                d = digit_of.pop(k)
                out.append(ring_label(d))
                released.append(d)
            for v, k in sorted(opens_, key=lambda vk: ranks[vk[0]]):
                d = free_digits.pop(0)
                digit_of[k] = d
                out.append(_bond_token(mol, k) + ring_label(d))
            for d in released:
                free_digits.append(d)
            free_digits.sort()
            kids = children[u]
            # push in reverse so the first child is emitted first
            for idx in range(len(kids) - 1, -1, -1):
                v, k = kids[idx]
                if idx == len(kids) - 1:
                    work.append(("atom", v, _bond_token(mol, k)))
                else:
                    work.append(("close", v, ""))
                    work.append(("atom", v, _bond_token(mol, k)))
                    work.append(("open", v, ""))
        return "".join(out)

    return ".".join(emit(r) for r in roots)


def canonical_smiles(mol: Molecule) -> str:
    return write_smiles(mol, canonical_ranks(mol))


def random_smiles(mol: Molecule, rng: np.random.Generator) -> str:
    """A valid, non-canonical SMILES for ``mol`` using a random atom order."""
    return write_smiles(mol, list(rng.permutation(len(mol.atoms))))
