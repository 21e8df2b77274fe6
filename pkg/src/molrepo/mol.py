"""SMILES parsing, valence validation, ring perception and canonical writing.

Molecules are hydrogen-suppressed graphs: hydrogens live as counts on their
heavy atom (``explicit_h`` from brackets or folded ``[H]`` atoms, plus
``implicit_h`` derived from the default valence).
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence


class SmilesError(ValueError):
    """Base class for everything the parser can reject."""


class SmilesSyntaxError(SmilesError):
    pass


class RingClosureError(SmilesError):
    pass


class ValenceError(SmilesError):
    pass


class AromaticityError(ValenceError):
    """Aromatic system that cannot be kekulized or sits outside a ring."""


class FragmentError(SmilesError):
    pass


ATOMIC_NUMBER = {"H": 1, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "P": 15,
                 "S": 16, "Cl": 17, "Br": 35, "I": 53}

ATOMIC_WEIGHT = {"H": 1.008, "B": 10.812, "C": 12.011, "N": 14.007, "O": 15.999,
                 "F": 18.998, "P": 30.974, "S": 32.067, "Cl": 35.453,
                 "Br": 79.904, "I": 126.904}

ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}

_NEUTRAL_VALENCE = {"H": (1,), "B": (3,), "C": (4,), "N": (3,), "O": (2,),
                    "F": (1,), "P": (3, 5), "S": (2, 4, 6), "Cl": (1,),
                    "Br": (1,), "I": (1, 3, 5)}
_PERIOD = {"B": 2, "C": 2, "N": 2, "O": 2, "F": 2, "P": 3, "S": 3, "Cl": 3,
           "Br": 4, "I": 5}
_GROUP = {"B": 13, "C": 14, "N": 15, "O": 16, "F": 17, "P": 15, "S": 16,
          "Cl": 17, "Br": 17, "I": 17}
# charged atoms take the valences of their isoelectronic neighbour in the same period
_ISO_VALENCE = {
    2: {13: (3,), 14: (4,), 15: (3,), 16: (2,), 17: (1,), 18: (0,)},
    3: {13: (3,), 14: (4,), 15: (3, 5), 16: (2, 4, 6), 17: (1,), 18: (0,)},
}


def allowed_valences(element: str, charge: int) -> tuple[int, ...]:
    if charge == 0:
        return _NEUTRAL_VALENCE[element]
    if element == "H":
        return (0,)
    group = _GROUP[element] - charge
    table = _ISO_VALENCE[min(_PERIOD[element], 3)]
    if group not in table:
        raise ValenceError(f"unsupported charge {charge:+d} on {element}")
    return table[group]


class BondOrder(str, enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    AROMATIC = "aromatic"

    @property
    def code(self) -> int:
        return _BOND_CODE[self]


_BOND_CODE = {BondOrder.SINGLE: 1, BondOrder.DOUBLE: 2, BondOrder.TRIPLE: 3,
              BondOrder.AROMATIC: 4}
_BOND_SYMBOL = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE,
                ":": BondOrder.AROMATIC, "/": BondOrder.SINGLE, "\\": BondOrder.SINGLE}
_INT_ORDER = {BondOrder.SINGLE: 1, BondOrder.DOUBLE: 2, BondOrder.TRIPLE: 3}


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int = 0
    implicit_h: int = 0
    ring_member: bool = False
    index: int = 0
    bracket: bool = False

    @property
    def total_h(self) -> int:
        return self.explicit_h + self.implicit_h

    @property
    def atomic_number(self) -> int:
        return ATOMIC_NUMBER[self.element]


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder

    def other(self, i: int) -> int:
        return self.end if i == self.begin else self.begin


@dataclass
class RawAtom:
    """Mutable atom record used while building or editing a graph."""
    element: str
    aromatic: bool = False
    charge: int = 0
    hcount: int = 0
    bracket: bool = False


@dataclass
class RawGraph:
    atoms: list[RawAtom] = field(default_factory=list)
    # (i, j, order); order None means "implicit" (single, or aromatic between aromatic atoms)
    bonds: list[tuple[int, int, BondOrder | None]] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Molecule:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    # integer bond orders of one Kekulé structure, parallel to ``bonds``
    kekule: tuple[int, ...]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Molecule):
            return NotImplemented
        return self.atoms == other.atoms and self.bonds == other.bonds

    def __hash__(self) -> int:
        return hash((self.atoms, self.bonds))

    def __len__(self) -> int:
        return len(self.atoms)

    def __repr__(self) -> str:
        return f"Molecule({write_canonical(self)!r})"

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom: tuple of (neighbour, bond index) sorted by neighbour."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for k, b in enumerate(self.bonds):
            adj[b.begin].append((b.end, k))
            adj[b.end].append((b.begin, k))
        return tuple(tuple(sorted(a)) for a in adj)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def neighbors(self, i: int) -> list[int]:
        return [j for j, _ in self.adjacency[i]]

    def bond_between(self, i: int, j: int) -> Bond | None:
        for n, k in self.adjacency[i]:
            if n == j:
                return self.bonds[k]
        return None

    @cached_property
    def rings(self) -> tuple[tuple[int, ...], ...]:
        return tuple(_sssr(len(self.atoms), [(b.begin, b.end) for b in self.bonds])[0])

    @property
    def ring_sets(self) -> tuple[tuple[int, ...], ...]:
        return self.rings

    @cached_property
    def ring_bonds(self) -> frozenset[int]:
        return frozenset(_sssr(len(self.atoms), [(b.begin, b.end) for b in self.bonds])[1])

    @cached_property
    def ring_counts(self) -> tuple[int, ...]:
        """Number of smallest-set rings each atom belongs to."""
        counts = [0] * len(self.atoms)
        for r in self.rings:
            for i in r:
                counts[i] += 1
        return tuple(counts)

    @cached_property
    def canonical_smiles(self) -> str:
        return _write(self, canonical_ranks(self))

    @property
    def heavy_atom_count(self) -> int:
        return sum(1 for a in self.atoms if a.element != "H")


# ---------------------------------------------------------------- tokenizing

def _parse_bracket(text: str, pos: int) -> tuple[RawAtom, int]:
    """Parse a bracket atom starting after '['; return atom and position after ']'."""
    end = text.find("]", pos)
    if end < 0:
        raise SmilesSyntaxError(f"unclosed bracket atom at {pos - 1}")
    body = text[pos:end]
    i = 0
    while i < len(body) and body[i].isdigit():  # isotope, ignored
        i += 1
    sym = None
    for cand in ("Cl", "Br"):
        if body.startswith(cand, i):
            sym, aromatic = cand, False
            i += 2
            break
    if sym is None:
        if i >= len(body):
            raise SmilesSyntaxError(f"empty bracket atom at {pos - 1}")
        ch = body[i]
        if ch in AROMATIC_SYMBOLS and not body.startswith("se", i) and not body.startswith("as", i):
            sym, aromatic = AROMATIC_SYMBOLS[ch], True
        elif ch in ATOMIC_NUMBER:
            sym, aromatic = ch, False
        else:
            raise SmilesSyntaxError(f"unsupported element in [{body}]")
        i += 1
        if i < len(body) and body[i].islower():
            raise SmilesSyntaxError(f"unsupported element in [{body}]")
    # chirality, parsed and discarded
    while i < len(body) and body[i] == "@":
        i += 1
    hcount = 0
    if i < len(body) and body[i] == "H":
        i += 1
        hcount = 1
        if i < len(body) and body[i].isdigit():
            hcount = int(body[i])
            i += 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        i += 1
        if i < len(body) and body[i].isdigit():
            charge = sign * int(body[i])
            i += 1
        else:
            charge = sign
            while i < len(body) and body[i] == ("+" if sign > 0 else "-"):
                charge += sign
                i += 1
    if i < len(body) and body[i] == ":":  # atom class
        i += 1
        while i < len(body) and body[i].isdigit():
            i += 1
    if i != len(body):
        raise SmilesSyntaxError(f"cannot parse bracket atom [{body}]")
    if sym == "H" and hcount:
        raise SmilesSyntaxError("hydrogen with H-count")
    return RawAtom(sym, aromatic, charge, hcount, True), end + 1


def parse_raw(text: str) -> RawGraph:
    """Tokenize and assemble a SMILES string into an unvalidated graph."""
    if not text:
        raise SmilesSyntaxError("empty SMILES")
    g = RawGraph()
    prev: int | None = None
    pending: BondOrder | None = None
    pending_set = False
    stack: list[int] = []
    rings: dict[int, tuple[int, BondOrder | None, bool]] = {}
    pairs: set[frozenset[int]] = set()
    i = 0
    n = len(text)

    def add_bond(a: int, b: int, order: BondOrder | None) -> None:
        key = frozenset((a, b))
        if a == b or key in pairs:
            raise RingClosureError(f"duplicate or self bond at position {i}")
        pairs.add(key)
        g.bonds.append((a, b, order))

    while i < n:
        ch = text[i]
        atom: RawAtom | None = None
        if ch == "[":
            atom, i = _parse_bracket(text, i + 1)
        elif text.startswith("Cl", i) or text.startswith("Br", i):
            atom = RawAtom(text[i:i + 2])
            i += 2
        elif ch in ORGANIC_SUBSET:
            atom = RawAtom(ch)
            i += 1
        elif ch in AROMATIC_SYMBOLS:
            atom = RawAtom(AROMATIC_SYMBOLS[ch], aromatic=True)
            i += 1
        elif ch in _BOND_SYMBOL:
            if pending_set or prev is None:
                raise SmilesSyntaxError(f"misplaced bond '{ch}' at {i}")
            pending, pending_set = _BOND_SYMBOL[ch], True
            i += 1
            continue
        elif ch == "(":
            if prev is None or pending_set:
                raise SmilesSyntaxError(f"misplaced branch at {i}")
            if i + 1 < n and text[i + 1] == ")":
                raise SmilesSyntaxError(f"empty branch at {i}")
            stack.append(prev)
            i += 1
            continue
        elif ch == ")":
            if not stack or pending_set:
                raise SmilesSyntaxError(f"unbalanced ')' at {i}")
            prev = stack.pop()
            i += 1
            continue
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesSyntaxError(f"ring bond without atom at {i}")
            if ch == "%":
                if i + 2 >= n or not text[i + 1:i + 3].isdigit():
                    raise SmilesSyntaxError(f"bad %nn ring label at {i}")
                label = int(text[i + 1:i + 3])
                i += 3
            else:
                label = int(ch)
                i += 1
            order = pending if pending_set else None
            pending, pending_set = None, False
            if label in rings:
                other, oorder, oset = rings.pop(label)
                if order is not None and oorder is not None and order != oorder:
                    raise RingClosureError(f"conflicting bond orders on ring label {label}")
                add_bond(other, prev, order if order is not None else oorder)
            else:
                rings[label] = (prev, order, order is not None)
            continue
        elif ch == ".":
            if prev is None or pending_set:
                raise SmilesSyntaxError(f"misplaced '.' at {i}")
            prev = None
            i += 1
            if i >= n or text[i] in ").":
                raise SmilesSyntaxError("dangling '.'")
            # '.' inside a branch is legal SMILES but keeps the branch open
            continue
        else:
            raise SmilesSyntaxError(f"illegal character {ch!r} at {i}")
        g.atoms.append(atom)
        idx = len(g.atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending if pending_set else None)
        elif pending_set:
            raise SmilesSyntaxError("bond without preceding atom")
        pending, pending_set = None, False
        prev = idx
    if pending_set:
        raise SmilesSyntaxError("trailing bond")
    if stack:
        raise SmilesSyntaxError("unclosed branch")
    if rings:
        raise RingClosureError(f"unclosed ring label(s) {sorted(rings)}")
    return g


# ------------------------------------------------------------------ rings

def _components(n: int, edges: Sequence[tuple[int, int]]) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        comp, todo = [], [s]
        while todo:
            v = todo.pop()
            comp.append(v)
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    todo.append(w)
        comps.append(sorted(comp))
    return comps


def _sssr(n: int, edges: Sequence[tuple[int, int]]) -> tuple[list[tuple[int, ...]], set[int]]:
    """Smallest set of smallest rings (Horton candidates + GF(2) elimination).

    Returns the rings as ordered atom cycles and the set of ring bond indices.
    """
    nrings = len(edges) - n + len(_components(n, edges))
    if nrings == 0:
        return [], set()
    # restrict to the 2-core: atoms on cycles or on paths between cycles
    deg = [0] * n
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, (a, b) in enumerate(edges):
        adj[a].append((b, k))
        adj[b].append((a, k))
        deg[a] += 1
        deg[b] += 1
    alive = [True] * n
    todo = [v for v in range(n) if deg[v] <= 1]
    while todo:
        v = todo.pop()
        if not alive[v]:
            continue
        alive[v] = False
        for w, _ in adj[v]:
            if alive[w]:
                deg[w] -= 1
                if deg[w] == 1:
                    todo.append(w)
    core = [v for v in range(n) if alive[v]]
    core_edges = [k for k, (a, b) in enumerate(edges) if alive[a] and alive[b]]

    candidates: dict[int, tuple[int, ...]] = {}
    for root in core:
        parent = {root: (-1, -1)}
        depth = {root: 0}
        order = [root]
        for v in order:
            for w, k in sorted(adj[v]):
                if alive[w] and w not in parent:
                    parent[w] = (v, k)
                    depth[w] = depth[v] + 1
                    order.append(w)

        def path(v: int) -> tuple[list[int], list[int]]:
            atoms_, bonds_ = [v], []
            while parent[v][0] >= 0:
                bonds_.append(parent[v][1])
                v = parent[v][0]
                atoms_.append(v)
            return atoms_, bonds_

        for k in core_edges:
            x, y = edges[k]
            if parent[x][1] == k or parent[y][1] == k:
                continue
            px, bx = path(x)
            py, by = path(y)
            if set(px) & set(py) != {root}:
                continue
            mask = 0
            for b in bx + by + [k]:
                mask |= 1 << b
            if mask not in candidates:
                # px runs x..root, so the cycle is root..x followed by y..(next to root)
                cycle = tuple(reversed(px)) + tuple(py[:-1])
                candidates[mask] = cycle
    basis: list[int] = []  # reduced masks, each with a distinct pivot bit
    pivots: dict[int, int] = {}
    chosen: list[tuple[int, ...]] = []
    ring_bond_set: set[int] = set()
    for mask, cycle in sorted(candidates.items(), key=lambda kv: (len(kv[1]), sorted(kv[1]))):
        red = mask
        while red:
            top = red.bit_length() - 1
            if top in pivots:
                red ^= pivots[top]
            else:
                break
        if red:
            pivots[red.bit_length() - 1] = red
            basis.append(red)
            chosen.append(_normalize_cycle(cycle))
            m = mask
            while m:
                low = m & -m
                ring_bond_set.add(low.bit_length() - 1)
                m ^= low
            if len(chosen) == nrings:
                break
    return chosen, ring_bond_set


def _normalize_cycle(cycle: tuple[int, ...]) -> tuple[int, ...]:
    i = cycle.index(min(cycle))
    rot = cycle[i:] + cycle[:i]
    if len(rot) > 2 and rot[-1] < rot[1]:
        rot = (rot[0],) + tuple(reversed(rot[1:]))
    return rot


# ---------------------------------------------------------- graph building

def _fold_hydrogens(g: RawGraph) -> RawGraph:
    """Turn bracket [H] atoms attached to one heavy atom into H counts."""
    nbrs: list[list[int]] = [[] for _ in g.atoms]
    for a, b, _ in g.bonds:
        nbrs[a].append(b)
        nbrs[b].append(a)
    drop = set()
    extra = [0] * len(g.atoms)
    for i, at in enumerate(g.atoms):
        if at.element == "H" and at.charge == 0 and len(nbrs[i]) == 1:
            j = nbrs[i][0]
            if g.atoms[j].element != "H":
                drop.add(i)
                extra[j] += 1
    if not drop:
        return g
    for a, b, order in g.bonds:
        if (a in drop or b in drop) and order not in (None, BondOrder.SINGLE):
            raise ValenceError("hydrogen with non-single bond")
    remap = {}
    atoms = []
    for i, at in enumerate(g.atoms):
        if i in drop:
            continue
        remap[i] = len(atoms)
        atoms.append(replace(at, hcount=at.hcount + extra[i]))
    bonds = [(remap[a], remap[b], o) for a, b, o in g.bonds if a not in drop and b not in drop]
    return RawGraph(atoms, bonds)


def _select_fragment(g: RawGraph, allow_fragments: bool) -> RawGraph:
    comps = _components(len(g.atoms), [(a, b) for a, b, _ in g.bonds])
    if len(comps) == 1:
        return g
    if not allow_fragments:
        raise FragmentError(f"{len(comps)} disconnected fragments")
    def size(c: list[int]) -> int:
        return sum(1 for i in c if g.atoms[i].element != "H")
    keep = max(comps, key=size)  # max() keeps the first on ties
    remap = {old: new for new, old in enumerate(keep)}
    atoms = [g.atoms[i] for i in keep]
    bonds = [(remap[a], remap[b], o) for a, b, o in g.bonds if a in remap]
    return RawGraph(atoms, bonds)


def _needs_double(at: RawAtom, base: int, has_multiple: bool) -> bool:
    """Whether an aromatic atom must take a double bond inside its aromatic system."""
    if has_multiple:
        return False
    if not at.bracket:
        if at.element == "C":
            return base <= 3
        if at.element in ("N", "P"):
            return base == 2
        return False
    for v in allowed_valences(at.element, at.charge):
        if v >= base:
            return v - base == 1
    return False


def _kekulize(n: int, need: list[bool], arom_bonds: list[tuple[int, int, int]]) -> dict[int, int] | None:
    """Pick a perfect matching of the atoms in ``need`` over aromatic bonds.

    Returns bond index -> order (2 for matched, 1 otherwise) or None.
    """
    opts: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n) if need[i]}
    for a, b, k in arom_bonds:
        if need[a] and need[b]:
            opts[a].append((b, k))
            opts[b].append((a, k))
    matched: dict[int, int] = {}
    chosen: list[int] = []

    def solve() -> bool:
        free = [i for i in opts if i not in matched]
        if not free:
            return True
        best = min(free, key=lambda i: (sum(1 for j, _ in opts[i] if j not in matched), i))
        for j, k in opts[best]:
            if j in matched:
                continue
            matched[best] = j
            matched[j] = best
            chosen.append(k)
            if solve():
                return True
            chosen.pop()
            del matched[best]
            del matched[j]
        return False

    if len(opts) % 2 or not solve():
        return None
    result = {k: 1 for _, _, k in arom_bonds}
    for k in chosen:
        result[k] = 2
    return result


def _perceive_kekule_rings(atoms: list[RawAtom], orders: list[BondOrder],
                           edges: list[tuple[int, int]], rings: list[tuple[int, ...]]) -> None:
    """Mark Kekulé 6-rings of alternating C/N as aromatic, fused systems included."""
    bond_of = {frozenset(e): k for k, e in enumerate(edges)}
    double_of: dict[int, list[int]] = {}
    for k, (a, b) in enumerate(edges):
        if orders[k] == BondOrder.DOUBLE:
            double_of.setdefault(a, []).append(k)
            double_of.setdefault(b, []).append(k)
    aromatic_bonds: set[int] = set()
    candidates = []
    for ring in rings:
        if len(ring) != 6:
            continue
        if any(atoms[i].element not in ("C", "N") or atoms[i].charge or atoms[i].aromatic
               for i in ring):
            continue
        ks = [bond_of[frozenset((ring[j], ring[(j + 1) % 6]))] for j in range(6)]
        if any(orders[k] not in (BondOrder.SINGLE, BondOrder.DOUBLE) for k in ks):
            continue
        if any(len(double_of.get(i, [])) != 1 for i in ring):
            continue
        candidates.append((ring, ks))
    changed = True
    done: set[int] = set()
    while changed:
        changed = False
        for ci, (ring, ks) in enumerate(candidates):
            if ci in done:
                continue
            ring_set = set(ks)
            ok = all(double_of[i][0] in ring_set or double_of[i][0] in aromatic_bonds for i in ring)
            if ok:
                done.add(ci)
                aromatic_bonds.update(ks)
                changed = True
    for ci in done:
        ring, ks = candidates[ci]
        for i in ring:
            atoms[i].aromatic = True
    for k in aromatic_bonds:
        orders[k] = BondOrder.AROMATIC


def build_molecule(g: RawGraph, allow_fragments: bool = False) -> Molecule:
    """Validate a raw graph and assign aromaticity, Kekulé orders and implicit H."""
    if not g.atoms:
        raise SmilesSyntaxError("no atoms")
    g = _fold_hydrogens(g)
    g = _select_fragment(g, allow_fragments)
    atoms = [replace(a) for a in g.atoms]
    edges = [(a, b) for a, b, _ in g.bonds]
    orders: list[BondOrder] = []
    for a, b, o in g.bonds:
        if o is None:
            o = BondOrder.AROMATIC if atoms[a].aromatic and atoms[b].aromatic else BondOrder.SINGLE
        elif o == BondOrder.AROMATIC and not (atoms[a].aromatic and atoms[b].aromatic):
            raise SmilesSyntaxError("aromatic bond between non-aromatic atoms")
        orders.append(o)
    n = len(atoms)
    rings, ring_bonds = _sssr(n, edges)
    for k in range(len(orders)):
        if orders[k] == BondOrder.AROMATIC and k not in ring_bonds:
            orders[k] = BondOrder.SINGLE
    _perceive_kekule_rings(atoms, orders, edges, rings)
    in_ring = [False] * n
    for r in rings:
        for i in r:
            in_ring[i] = True
    for i, at in enumerate(atoms):
        if at.aromatic and not in_ring[i]:
            raise AromaticityError(f"aromatic atom {i} ({at.element}) outside any ring")
        if at.aromatic and at.element not in AROMATIC_SYMBOLS.values():
            raise AromaticityError(f"{at.element} cannot be aromatic")

    nonarom_sum = [0] * n
    arom_count = [0] * n
    has_multiple = [False] * n
    for k, (a, b) in enumerate(edges):
        o = orders[k]
        for x in (a, b):
            if o == BondOrder.AROMATIC:
                arom_count[x] += 1
            else:
                nonarom_sum[x] += _INT_ORDER[o]
                if o != BondOrder.SINGLE:
                    has_multiple[x] = True
    need = [False] * n
    for i, at in enumerate(atoms):
        if at.aromatic:
            if arom_count[i] == 0:
                raise AromaticityError(f"aromatic atom {i} has no aromatic bonds")
            base = nonarom_sum[i] + arom_count[i] + at.hcount
            need[i] = _needs_double(at, base, has_multiple[i])
    arom = [(a, b, k) for k, (a, b) in enumerate(edges) if orders[k] == BondOrder.AROMATIC]
    kek_map = _kekulize(n, need, arom) if arom else {}
    if kek_map is None:
        raise AromaticityError("cannot kekulize aromatic system")
    kekule = [kek_map[k] if orders[k] == BondOrder.AROMATIC else _INT_ORDER[orders[k]]
              for k in range(len(orders))]
    bond_sum = [0] * n
    for k, (a, b) in enumerate(edges):
        bond_sum[a] += kekule[k]
        bond_sum[b] += kekule[k]

    final_atoms = []
    for i, at in enumerate(atoms):
        total = bond_sum[i] + at.hcount
        allowed = allowed_valences(at.element, at.charge)
        implicit = 0
        if at.bracket:
            if total not in allowed:
                raise ValenceError(f"atom {i} ({at.element}{at.charge:+d}) has valence {total}, "
                                   f"allowed {allowed}")
        else:
            fit = [v for v in allowed if v >= total]
            if not fit:
                raise ValenceError(f"atom {i} ({at.element}) exceeds valence: {total} > {max(allowed)}")
            implicit = fit[0] - total
        final_atoms.append(Atom(at.element, at.aromatic, at.charge, at.hcount, implicit,
                                in_ring[i], i, at.bracket))
    bonds = tuple(Bond(min(a, b), max(a, b), orders[k]) for k, (a, b) in enumerate(edges))
    return Molecule(tuple(final_atoms), bonds, tuple(kekule))


def parse_smiles(text: str, allow_fragments: bool = False) -> Molecule:
    """Parse a SMILES string into a validated :class:`Molecule`.

    Stereo markers are accepted and discarded. Disconnected input raises
    :class:`FragmentError` unless ``allow_fragments`` is set, in which case the
    largest fragment is kept.
    """
    text = text.strip()
    if not text:
        raise SmilesSyntaxError("empty SMILES")
    return build_molecule(parse_raw(text), allow_fragments=allow_fragments)


def to_raw(mol: Molecule) -> RawGraph:
    """Editable copy of a molecule (hydrogen counts become explicit for bracket atoms)."""
    atoms = [RawAtom(a.element, a.aromatic, a.formal_charge, a.explicit_h, a.bracket)
             for a in mol.atoms]
    bonds = [(b.begin, b.end, b.order) for b in mol.bonds]
    return RawGraph(atoms, bonds)


# -------------------------------------------------------------- canonical

def _rank(keys: Sequence) -> list[int]:
    uniq = sorted(set(keys))
    pos = {k: r for r, k in enumerate(uniq)}
    return [pos[k] for k in keys]


def _refine(mol: Molecule, ranks: list[int]) -> list[int]:
    n = len(ranks)
    while True:
        keys = [(ranks[i], tuple(sorted((mol.bonds[k].order.code, ranks[j])
                                        for j, k in mol.adjacency[i]))) for i in range(n)]
        new = _rank(keys)
        if len(set(new)) == len(set(ranks)):
            return new
        ranks = new


def canonical_ranks(mol: Molecule) -> list[int]:
    """Canonical atom ranks by iterative neighbourhood refinement with tie-breaking.

    Initial invariant orders atoms by degree, element, charge and H count, so
    the canonical walk starts at a terminal atom when there is one.
    """
    n = len(mol.atoms)
    keys = [(mol.degree(i), a.atomic_number, a.formal_charge, a.total_h,
             a.aromatic, a.ring_member) for i, a in enumerate(mol.atoms)]
    ranks = _refine(mol, _rank(keys))
    while len(set(ranks)) < n:
        counts: dict[int, int] = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied = min(r for r, c in counts.items() if c > 1)
        pick = min(i for i in range(n) if ranks[i] == tied)
        ranks = [2 * r + (1 if (r == tied and i != pick) or r > tied else 0) for i, r in enumerate(ranks)]
        ranks = _refine(mol, _rank(ranks))
    return ranks


def implied_bare_h(mol: Molecule, i: int) -> int | None:
    """H count a reader would assign if atom ``i`` were written without brackets.

    None when the atom cannot be written bare at all.
    """
    at = mol.atoms[i]
    if at.element not in ORGANIC_SUBSET or at.formal_charge != 0:
        return None
    nonarom = 0
    arom = 0
    multiple = False
    for _, k in mol.adjacency[i]:
        o = mol.bonds[k].order
        if o == BondOrder.AROMATIC:
            arom += 1
        else:
            nonarom += _INT_ORDER[o]
            multiple = multiple or o != BondOrder.SINGLE
    total = nonarom + arom
    if at.aromatic:
        raw = RawAtom(at.element, True)
        if _needs_double(raw, total, multiple):
            total += 1
    fit = [v for v in _NEUTRAL_VALENCE[at.element] if v >= total]
    if not fit:
        return None
    return fit[0] - total


def _atom_token(mol: Molecule, i: int) -> str:
    at = mol.atoms[i]
    sym = at.element.lower() if at.aromatic else at.element
    if implied_bare_h(mol, i) == at.total_h:
        return sym
    out = "[" + sym
    if at.total_h:
        out += "H" if at.total_h == 1 else f"H{at.total_h}"
    if at.formal_charge:
        q = at.formal_charge
        out += ("+" if q > 0 else "-") + (str(abs(q)) if abs(q) > 1 else "")
    return out + "]"


def _bond_token(mol: Molecule, k: int) -> str:
    b = mol.bonds[k]
    if b.order == BondOrder.AROMATIC:
        return ""
    if b.order == BondOrder.SINGLE:
        a1, a2 = mol.atoms[b.begin], mol.atoms[b.end]
        return "-" if a1.aromatic and a2.aromatic else ""
    return "=" if b.order == BondOrder.DOUBLE else "#"


def _write(mol: Molecule, ranks: Sequence[int]) -> str:
    n = len(mol.atoms)
    if n == 0:
        return ""
    start = min(range(n), key=lambda i: ranks[i])
    visited = [False] * n
    order: list[int] = []
    children: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    closures: list[tuple[int, int, int]] = []  # (earlier atom, later atom, bond)
    tree_bonds: set[int] = set()
    # iterative DFS, neighbours in rank order
    stack = [(start, -1)]
    while stack:
        v, via = stack.pop()
        if visited[v]:
            continue
        visited[v] = True
        order.append(v)
        if via >= 0:
            tree_bonds.add(via)
            parent = mol.bonds[via].other(v)
            children[parent].append((v, via))
        nbrs = sorted(mol.adjacency[v], key=lambda jk: ranks[jk[0]])
        for j, k in reversed(nbrs):
            if not visited[j]:
                stack.append((j, k))
    pos = {v: p for p, v in enumerate(order)}
    for k, b in enumerate(mol.bonds):
        if k not in tree_bonds:
            a, c = sorted((b.begin, b.end), key=lambda x: pos[x])
            closures.append((a, c, k))
    # children were appended in visit order, which may not be rank order for branch layout
    opens: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    closes: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    for a, c, k in sorted(closures, key=lambda t: (pos[t[0]], pos[t[1]])):
        opens[a].append((c, k))
        closes[c].append((a, k))

    digit_of: dict[int, int] = {}
    free: list[int] = []
    next_digit = [1]

    def label(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    out: list[str] = []
    # explicit stack of work items to avoid recursion limits
    work: list = [("atom", start)]
    while work:
        item = work.pop()
        if item[0] == "text":
            out.append(item[1])
            continue
        v = item[1]
        out.append(_atom_token(mol, v))
        for a, k in sorted(closes[v], key=lambda t: digit_of[t[1]]):
            d = digit_of.pop(k)
            out.append(label(d))
            free.append(d)
            free.sort()
        for c, k in opens[v]:
            if free:
                d = free.pop(0)
            else:
                d = next_digit[0]
                next_digit[0] += 1
            digit_of[k] = d
            out.append(_bond_token(mol, k) + label(d))
        kids = children[v]
        seq: list = []
        for idx, (c, k) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                seq.append(("text", "(" + _bond_token(mol, k)))
                seq.append(("atom", c))
                seq.append(("text", ")"))
            else:
                seq.append(("text", _bond_token(mol, k)))
                seq.append(("atom", c))
        work.extend(reversed(seq))
    return "".join(out)


def write_canonical(mol: Molecule) -> str:
    """Deterministic SMILES; isomorphic attributed graphs give identical strings."""
    return mol.canonical_smiles


def random_smiles(mol: Molecule, rng: random.Random) -> str:
    """A valid but non-canonical spelling (random atom ranking)."""
    ranks = list(range(len(mol.atoms)))
    rng.shuffle(ranks)
    return _write(mol, ranks)


def canonicalize(text: str) -> str:
    return write_canonical(parse_smiles(text))


def mol_weight(mol: Molecule) -> float:
    """Average molecular mass in amu, implicit hydrogens included."""
    h = ATOMIC_WEIGHT["H"]
    return math.fsum(ATOMIC_WEIGHT[a.element] + h * a.total_h for a in mol.atoms)


def ring_info(mol: Molecule) -> list[tuple[int, ...]]:
    return list(mol.rings)


def permute(mol: Molecule, perm: Sequence[int]) -> Molecule:
    """Relabel atoms: new index of old atom i is perm[i]."""
    n = len(mol.atoms)
    inv = [0] * n
    for old, new in enumerate(perm):
        inv[new] = old
    atoms = tuple(replace(mol.atoms[inv[new]], index=new) for new in range(n))
    pairs = sorted(((min(perm[b.begin], perm[b.end]), max(perm[b.begin], perm[b.end])), b.order, kk)
                   for b, kk in zip(mol.bonds, mol.kekule))
    bonds = tuple(Bond(a, c, o) for (a, c), o, _ in pairs)
    kek = tuple(kk for _, _, kk in pairs)
    return Molecule(atoms, bonds, kek)


def read_corpus(lines: Iterable[str]) -> list[str]:
    """SMILES per line; '#' starts a comment; blank lines skipped."""
    out = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line.split()[0])
    return out


def is_isomorphic(a: Molecule, b: Molecule) -> bool:
    return len(a.atoms) == len(b.atoms) and write_canonical(a) == write_canonical(b)


__all__ = [
    "Atom", "Bond", "BondOrder", "Molecule", "RawAtom", "RawGraph",
    "SmilesError", "SmilesSyntaxError", "RingClosureError", "ValenceError",
    "AromaticityError", "FragmentError", "parse_smiles", "parse_raw",
    "build_molecule", "to_raw", "write_canonical", "canonical_ranks",
    "canonicalize", "random_smiles", "mol_weight", "ring_info", "permute",
    "read_corpus", "allowed_valences", "is_isomorphic",
]
