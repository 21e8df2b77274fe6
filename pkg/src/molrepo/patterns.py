"""A restricted SMARTS dialect and a backtracking substructure matcher.

Supported inside brackets: element symbols (aliphatic and aromatic), ``#n``,
``A``, ``a``, ``*``, ``H<n>`` (total H), ``D<n>`` (heavy degree), ``X<n>``
(heavy degree plus H), ``R`` / ``R<n>`` (ring membership), charges, and the
logical operators ``!``, ``&``, ``,``, ``;`` plus implicit conjunction.
Bonds: ``- = # : ~`` and the default single-or-aromatic bond. Recursive
environments and anything else raise :class:`UnsupportedFeature`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterator

from .mol import ATOMIC_NUMBER, BondOrder, Molecule, parse_smiles


class PatternError(ValueError):
    pass


class PatternSyntaxError(PatternError):
    pass


class UnsupportedFeature(PatternError):
    pass


# A predicate node is a nested tuple:
#   ("elem", symbol, aromatic) ("num", z) ("arom", flag) ("any",)
#   ("H", n) ("D", n) ("X", n) ("R", n or None) ("chg", q)
#   ("not", node) ("and", nodes...) ("or", nodes...)
Node = tuple

_AROMATIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
_BONDS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic", "~": "any"}


@dataclass(frozen=True)
class PatternExpr:
    text: str
    atoms: tuple[Node, ...]
    # (i, j, bond kind) with i < j in pattern order; kind "default" = single or aromatic
    bonds: tuple[tuple[int, int, str], ...]

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def root_elements(self) -> frozenset[str] | None:
        """Elements the first pattern atom can match, or None if unrestricted."""
        return _elements(self.atoms[0])


def _elements(node: Node) -> frozenset[str] | None:
    kind = node[0]
    if kind == "elem":
        return frozenset([node[1]])
    if kind == "num":
        sym = [s for s, z in ATOMIC_NUMBER.items() if z == node[1]]
        return frozenset(sym)
    if kind == "and":
        out = None
        for sub in node[1:]:
            e = _elements(sub)
            if e is not None:
                out = e if out is None else out & e
        return out
    if kind == "or":
        out = set()
        for sub in node[1:]:
            e = _elements(sub)
            if e is None:
                return None
            out |= e
        return frozenset(out)
    return None


# ------------------------------------------------------------------ parsing

def _read_int(s: str, i: int) -> tuple[int | None, int]:
    j = i
    while j < len(s) and s[j].isdigit():
        j += 1
    return (int(s[i:j]) if j > i else None), j


def _parse_term(s: str) -> Node:
    """Implicit-conjunction sequence of (possibly negated) primitives."""
    if not s:
        raise PatternSyntaxError("empty atom expression")
    parts: list[Node] = []
    i = 0
    while i < len(s):
        neg = False
        while i < len(s) and s[i] == "!":
            neg = not neg
            i += 1
        if i >= len(s):
            raise PatternSyntaxError(f"dangling '!' in {s!r}")
        ch = s[i]
        if ch == "$":
            raise UnsupportedFeature("recursive SMARTS is not supported")
        if ch == "#":
            n, i = _read_int(s, i + 1)
            if n is None:
                raise PatternSyntaxError(f"'#' without atomic number in {s!r}")
            node: Node = ("num", n)
        elif s.startswith("Cl", i) or s.startswith("Br", i):
            node = ("elem", s[i:i + 2], False)
            i += 2
        elif ch in "BCNOPSFI":
            node = ("elem", ch, False)
            i += 1
        elif ch in _AROMATIC:
            node = ("elem", _AROMATIC[ch], True)
            i += 1
        elif ch == "A":
            node = ("arom", False)
            i += 1
        elif ch == "a":
            node = ("arom", True)
            i += 1
        elif ch == "*":
            node = ("any",)
            i += 1
        elif ch in "HDX":
            n, i = _read_int(s, i + 1)
            node = (ch, 1 if n is None else n)
        elif ch == "R":
            n, i = _read_int(s, i + 1)
            node = ("R", n)
        elif ch in "+-":
            sign = 1 if ch == "+" else -1
            n, j = _read_int(s, i + 1)
            if n is not None:
                q, i = sign * n, j
            else:
                q, i = sign, i + 1
                while i < len(s) and s[i] == ch:
                    q += sign
                    i += 1
            node = ("chg", q)
        else:
            raise UnsupportedFeature(f"unsupported atom primitive {ch!r} in {s!r}")
        parts.append(("not", node) if neg else node)
    return parts[0] if len(parts) == 1 else ("and", *parts)


def parse_atom_expr(s: str) -> Node:
    """Parse the inside of a bracket atom with SMARTS operator precedence."""
    if "$" in s:
        raise UnsupportedFeature("recursive SMARTS is not supported")
    lows = []
    for low in s.split(";"):
        ors = []
        for alt in low.split(","):
            ands = [_parse_term(t) for t in alt.split("&")]
            ors.append(ands[0] if len(ands) == 1 else ("and", *ands))
        lows.append(ors[0] if len(ors) == 1 else ("or", *ors))
    return lows[0] if len(lows) == 1 else ("and", *lows)


def parse_pattern(text: str) -> PatternExpr:
    """Parse a SMARTS-subset string into a :class:`PatternExpr`."""
    if not text or not text.strip():
        raise PatternSyntaxError("empty pattern")
    text = text.strip()
    atoms: list[Node] = []
    bonds: list[tuple[int, int, str]] = []
    prev: int | None = None
    pending: str | None = None
    stack: list[int] = []
    rings: dict[int, tuple[int, str | None]] = {}
    i = 0
    while i < len(text):
        ch = text[i]
        node: Node | None = None
        if ch == "[":
            end = text.find("]", i)
            if end < 0:
                raise PatternSyntaxError("unclosed bracket")
            node = parse_atom_expr(text[i + 1:end])
            i = end + 1
        elif text.startswith("Cl", i) or text.startswith("Br", i):
            node = ("elem", text[i:i + 2], False)
            i += 2
        elif ch in "BCNOPSFI":
            node = ("elem", ch, False)
            i += 1
        elif ch in _AROMATIC:
            node = ("elem", _AROMATIC[ch], True)
            i += 1
        elif ch in "Aa*":
            node = {"A": ("arom", False), "a": ("arom", True), "*": ("any",)}[ch]
            i += 1
        elif ch in _BONDS:
            if pending is not None or prev is None:
                raise PatternSyntaxError(f"misplaced bond at {i}")
            pending = _BONDS[ch]
            i += 1
            continue
        elif ch == "(":
            if prev is None:
                raise PatternSyntaxError("branch without atom")
            stack.append(prev)
            i += 1
            continue
        elif ch == ")":
            if not stack:
                raise PatternSyntaxError("unbalanced ')'")
            prev = stack.pop()
            i += 1
            continue
        elif ch.isdigit():
            if prev is None:
                raise PatternSyntaxError("ring bond without atom")
            label = int(ch)
            i += 1
            if label in rings:
                other, order = rings.pop(label)
                kind = pending or order or "default"
                bonds.append((min(other, prev), max(other, prev), kind))
            else:
                rings[label] = (prev, pending)
            pending = None
            continue
        elif ch == ".":
            raise UnsupportedFeature("disconnected patterns are not supported")
        else:
            raise UnsupportedFeature(f"unsupported pattern character {ch!r}")
        atoms.append(node)
        idx = len(atoms) - 1
        if prev is not None:
            bonds.append((prev, idx, pending or "default"))
        pending = None
        prev = idx
    if stack:
        raise PatternSyntaxError("unclosed branch")
    if rings:
        raise PatternSyntaxError("unclosed ring bond in pattern")
    if pending is not None:
        raise PatternSyntaxError("trailing bond")
    return PatternExpr(text, tuple(atoms), tuple(bonds))


# ----------------------------------------------------------------- matching

def _compile(node: Node) -> Callable[[Molecule, int], bool]:
    kind = node[0]
    if kind == "elem":
        sym, arom = node[1], node[2]
        return lambda m, i: m.atoms[i].element == sym and m.atoms[i].aromatic == arom
    if kind == "num":
        z = node[1]
        return lambda m, i: m.atoms[i].atomic_number == z
    if kind == "arom":
        flag = node[1]
        return lambda m, i: m.atoms[i].aromatic == flag
    if kind == "any":
        return lambda m, i: True
    if kind == "H":
        n = node[1]
        return lambda m, i: m.atoms[i].total_h == n
    if kind == "D":
        n = node[1]
        return lambda m, i: len(m.adjacency[i]) == n
    if kind == "X":
        n = node[1]
        return lambda m, i: len(m.adjacency[i]) + m.atoms[i].total_h == n
    if kind == "R":
        n = node[1]
        if n is None:
            return lambda m, i: m.ring_counts[i] > 0
        return lambda m, i: m.ring_counts[i] == n
    if kind == "chg":
        q = node[1]
        return lambda m, i: m.atoms[i].formal_charge == q
    if kind == "not":
        f = _compile(node[1])
        return lambda m, i: not f(m, i)
    if kind == "and":
        fs = tuple(_compile(n) for n in node[1:])
        return lambda m, i: all(f(m, i) for f in fs)
    if kind == "or":
        fs = tuple(_compile(n) for n in node[1:])
        return lambda m, i: any(f(m, i) for f in fs)
    raise UnsupportedFeature(f"unknown predicate {kind}")


def _bond_ok(kind: str, order: BondOrder) -> bool:
    if kind == "default":
        return order in (BondOrder.SINGLE, BondOrder.AROMATIC)
    if kind == "any":
        return True
    return order.value == kind


@dataclass(frozen=True)
class _Plan:
    preds: tuple[Callable[[Molecule, int], bool], ...]
    # per pattern atom k>0: (anchor atom, anchor bond kind, [(earlier atom, bond kind)...])
    steps: tuple[tuple[int, str, tuple[tuple[int, str], ...]], ...]


@lru_cache(maxsize=4096)
def _plan(pat: PatternExpr) -> _Plan:
    preds = tuple(_compile(a) for a in pat.atoms)
    steps = []
    for k in range(1, len(pat.atoms)):
        back = sorted((min(i, j), kind) for i, j, kind in pat.bonds if max(i, j) == k)
        if not back:
            raise PatternSyntaxError("pattern graph is not connected")
        steps.append((back[0][0], back[0][1], tuple(back[1:])))
    return _Plan(preds, tuple(steps))


def iter_matches(mol: Molecule, pat: PatternExpr, root: int | None = None) -> Iterator[tuple[int, ...]]:
    """Yield every injective mapping (pattern atom order) of ``pat`` into ``mol``."""
    plan = _plan(pat)
    n = len(pat.atoms)
    mapping = [-1] * n
    used = set()

    def extend(k: int) -> Iterator[tuple[int, ...]]:
        if k == n:
            yield tuple(mapping)
            return
        anchor, kind, extra = plan.steps[k - 1]
        for j, b in mol.adjacency[mapping[anchor]]:
            if j in used or not _bond_ok(kind, mol.bonds[b].order):
                continue
            if not plan.preds[k](mol, j):
                continue
            ok = True
            for e, ekind in extra:
                bond = mol.bond_between(mapping[e], j)
                if bond is None or not _bond_ok(ekind, bond.order):
                    ok = False
                    break
            if not ok:
                continue
            mapping[k] = j
            used.add(j)
            yield from extend(k + 1)
            used.discard(j)
        mapping[k] = -1

    roots = range(len(mol.atoms)) if root is None else (root,)
    for r in roots:
        if not plan.preds[0](mol, r):
            continue
        mapping[0] = r
        used.add(r)
        yield from extend(1)
        used.discard(r)


def has_match_at(mol: Molecule, pat: PatternExpr, root: int) -> bool:
    """True if some embedding maps the first pattern atom onto ``root``."""
    return next(iter_matches(mol, pat, root), None) is not None


def match_sets(mol: Molecule, pat: PatternExpr) -> list[frozenset[int]]:
    """Distinct matched atom sets, in order of first discovery."""
    seen: dict[frozenset[int], None] = {}
    for m in iter_matches(mol, pat):
        seen.setdefault(frozenset(m), None)
    return list(seen)


def match_count(mol: Molecule, pat: PatternExpr) -> int:
    """Number of distinct matched atom sets (automorphic duplicates collapse)."""
    return len(match_sets(mol, pat))


# ------------------------------------------------------------ group library

@dataclass(frozen=True)
class Group:
    name: str
    pattern: PatternExpr
    fragment: str      # SMILES attached through its first atom by structure edits
    exemplar: str      # a molecule the pattern must match
    removed: tuple[int, ...] = ()  # pattern atom indices deleted when the group is removed


def _data_text(name: str) -> str:
    return resources.files("molrepo").joinpath("data", name).read_text()


def load_groups(text: str | None = None) -> dict[str, Group]:
    """Read ``name<TAB>pattern<TAB>fragment<TAB>exemplar<TAB>removed`` lines."""
    if text is None:
        text = _data_text("groups.tsv")
    out: dict[str, Group] = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise PatternSyntaxError(f"bad library line: {line!r}")
        name, pat = cols[0].strip(), cols[1].strip()
        frag = cols[2].strip() if len(cols) > 2 else ""
        ex = cols[3].strip() if len(cols) > 3 else ""
        removed = tuple(int(x) for x in cols[4].split(",")) if len(cols) > 4 and cols[4].strip() else ()
        pattern = parse_pattern(pat)
        if any(not 0 <= k < len(pattern) for k in removed):
            raise PatternSyntaxError(f"removed-atom index out of range for {name}")
        out[name] = Group(name, pattern, frag, ex, removed)
    return out


_LIBRARY: dict[str, Group] | None = None


def group_library() -> dict[str, Group]:
    """The shipped functional-group library (loaded once)."""
    global _LIBRARY
    if _LIBRARY is None:
        _LIBRARY = load_groups()
    return _LIBRARY


def group_pattern(name: str) -> PatternExpr:
    return group_library()[name].pattern


def count_group(mol: Molecule, name: str) -> int:
    return match_count(mol, group_pattern(name))


def check_library(lib: dict[str, Group] | None = None) -> list[str]:
    """Names of groups whose exemplar fails to parse or match; empty when sound."""
    lib = group_library() if lib is None else lib
    bad = []
    for name, g in lib.items():
        try:
            if match_count(parse_smiles(g.exemplar), g.pattern) < 1:
                bad.append(name)
        except ValueError:
            bad.append(name)
    return bad
