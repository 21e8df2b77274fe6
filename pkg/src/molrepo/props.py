"""Target-property functions: Crippen LogP and MR, Ertl TPSA, QED, MW."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .mol import BondOrder, Molecule, mol_weight
from .patterns import Group, PatternExpr, has_match_at, match_count, parse_pattern


class TypingError(ValueError):
    """An atom matched no contribution pattern (a gap in the table)."""


class PropertyId(str, enum.Enum):
    LOGP = "LogP"
    MR = "MR"
    QED = "QED"
    TPSA = "TPSA"
    MW = "MW"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value.lower() == value.lower():
                    return member
        return None


def _data(name: str) -> str:
    return resources.files("molrepo").joinpath("data", name).read_text()


@dataclass(frozen=True)
class ContributionRow:
    type: str
    pattern: PatternExpr
    logp: float
    mr: float
    target: str  # "atom" or "h"


@dataclass(frozen=True)
class ContributionTable:
    rows: tuple[ContributionRow, ...]

    def candidates(self, element: str, target: str) -> tuple[ContributionRow, ...]:
        return _candidates(self, element, target)


@lru_cache(maxsize=None)
def _candidates(table: ContributionTable, element: str, target: str) -> tuple[ContributionRow, ...]:
    out = []
    for row in table.rows:
        if row.target != target:
            continue
        roots = row.pattern.root_elements
        if roots is None or element in roots:
            out.append(row)
    return tuple(out)


def load_crippen(text: str | None = None) -> ContributionTable:
    text = _data("crippen.tsv") if text is None else text
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        t, pat, lp, mr, target = line.split("\t")
        rows.append(ContributionRow(t, parse_pattern(pat), float(lp), float(mr), target))
    return ContributionTable(tuple(rows))


@lru_cache(maxsize=1)
def crippen_table() -> ContributionTable:
    return load_crippen()


def crippen_types(mol: Molecule, table: ContributionTable | None = None) -> list[tuple[str, str | None]]:
    """Per atom: (heavy-atom type, hydrogen type or None when the atom has no H)."""
    table = crippen_table() if table is None else table
    out = []
    for i, atom in enumerate(mol.atoms):
        heavy = _first_match(mol, i, table.candidates(atom.element, "atom"))
        if heavy is None:
            raise TypingError(f"no Crippen type for atom {i} ({atom.element})")
        h = None
        if atom.total_h:
            hrow = _first_match(mol, i, table.candidates(atom.element, "h"))
            if hrow is None:
                raise TypingError(f"no Crippen hydrogen type for atom {i}")
            h = hrow.type
        out.append((heavy.type, h))
    return out


def _first_match(mol: Molecule, i: int, rows) -> ContributionRow | None:
    for row in rows:
        if has_match_at(mol, row.pattern, i):
            return row
    return None


_CRIPPEN_CACHE: dict[str, tuple[float, float]] = {}


def _crippen(mol: Molecule) -> tuple[float, float]:
    key = mol.canonical_smiles
    hit = _CRIPPEN_CACHE.get(key)
    if hit is not None:
        return hit
    table = crippen_table()
    logp_terms, mr_terms = [], []
    for i, atom in enumerate(mol.atoms):
        row = _first_match(mol, i, table.candidates(atom.element, "atom"))
        if row is None:
            raise TypingError(f"no Crippen type for atom {i} ({atom.element})")
        logp_terms.append(row.logp)
        mr_terms.append(row.mr)
        if atom.total_h:
            hrow = _first_match(mol, i, table.candidates(atom.element, "h"))
            if hrow is None:
                raise TypingError(f"no Crippen hydrogen type for atom {i}")
            logp_terms.append(atom.total_h * hrow.logp)
            mr_terms.append(atom.total_h * hrow.mr)
    # fsum is exactly rounded, so the result does not depend on atom order.
    logp, mr = math.fsum(logp_terms), math.fsum(mr_terms)
    if len(_CRIPPEN_CACHE) > 200_000:
        _CRIPPEN_CACHE.clear()
    _CRIPPEN_CACHE[key] = (logp, mr)
    return logp, mr


def crippen_logp(mol: Molecule) -> float:
    """Wildman-Crippen octanol/water partition estimate."""
    return _crippen(mol)[0]


def crippen_mr(mol: Molecule) -> float:
    """Wildman-Crippen molar refractivity."""
    return _crippen(mol)[1]


# --------------------------------------------------------------------- TPSA

@dataclass(frozen=True)
class _TpsaRow:
    element: str
    fields: tuple[int | None, ...]  # nbrs, H, charge, single, double, triple, aromatic
    ring3: bool | None
    value: float


@lru_cache(maxsize=1)
def tpsa_table() -> tuple[tuple[_TpsaRow, ...], dict[str, tuple[float, float, float]]]:
    rows, fallback = [], {}
    for line in _data("tpsa.tsv").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if cols[0] == "fallback":
            fallback[cols[1]] = (float(cols[2]), float(cols[3]), float(cols[4]))
            continue
        fields = tuple(None if c == "*" else int(c) for c in cols[1:8])
        ring3 = None if cols[8] == "*" else cols[8] == "y"
        rows.append(_TpsaRow(cols[0], fields, ring3, float(cols[9])))
    return tuple(rows), fallback


def _in_ring_of_size(mol: Molecule, i: int, size: int) -> bool:
    return any(len(r) == size and i in r for r in mol.rings)


def atom_tpsa(mol: Molecule, i: int) -> float:
    atom = mol.atoms[i]
    rows, fallback = tpsa_table()
    if atom.element not in fallback:
        return 0.0
    counts = {o: 0 for o in BondOrder}
    for _, k in mol.adjacency[i]:
        counts[mol.bonds[k].order] += 1
    nbrs = mol.degree(i)
    env = (nbrs, atom.total_h, atom.formal_charge, counts[BondOrder.SINGLE],
           counts[BondOrder.DOUBLE], counts[BondOrder.TRIPLE], counts[BondOrder.AROMATIC])
    ring3 = _in_ring_of_size(mol, i, 3)
    for row in rows:
        if row.element != atom.element:
            continue
        if all(f is None or f == e for f, e in zip(row.fields, env)) and \
                (row.ring3 is None or row.ring3 == ring3):
            return row.value
    base, per_nbr, per_h = fallback[atom.element]
    return max(0.0, base + per_nbr * nbrs + per_h * atom.total_h)


def tpsa(mol: Molecule) -> float:
    """Topological polar surface area from N and O contributions."""
    return math.fsum(atom_tpsa(mol, i) for i in range(len(mol.atoms)))


# ---------------------------------------------------------------------- QED

@dataclass(frozen=True)
class DescriptorVector:
    mw: float
    alogp: float
    hba: int
    hbd: int
    tpsa: float
    rotb: int
    arom: int
    alerts: int

    def as_tuple(self) -> tuple[float, ...]:
        return (self.mw, self.alogp, self.hba, self.hbd, self.tpsa, self.rotb,
                self.arom, self.alerts)


QED_NAMES = ("MW", "ALOGP", "HBA", "HBD", "PSA", "ROTB", "AROM", "ALERTS")


@lru_cache(maxsize=1)
def qed_params() -> dict[str, tuple[float, ...]]:
    """name -> (A, B, C, D, E, F, DMAX, mean weight, max weight)."""
    out = {}
    for line in _data("qed_params.tsv").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split()
        out[cols[0]] = tuple(float(c) for c in cols[1:])
    missing = set(QED_NAMES) - set(out)
    if missing:
        raise ValueError(f"qed_params.tsv lacks {sorted(missing)}")
    return out


def _is_amide_cn(mol: Molecule, a: int, b: int) -> bool:
    for c, n in ((a, b), (b, a)):
        if mol.atoms[c].element == "C" and mol.atoms[n].element == "N":
            for j, k in mol.adjacency[c]:
                if mol.atoms[j].element == "O" and mol.bonds[k].order == BondOrder.DOUBLE:
                    return True
    return False


def rotatable_bonds(mol: Molecule) -> int:
    """Acyclic single bonds between non-terminal heavy atoms, amide C-N excluded."""
    n = 0
    ring = mol.ring_bonds
    for k, b in enumerate(mol.bonds):
        if b.order != BondOrder.SINGLE or k in ring:
            continue
        if mol.degree(b.begin) < 2 or mol.degree(b.end) < 2:
            continue
        if _is_amide_cn(mol, b.begin, b.end):
            continue
        n += 1
    return n


def aromatic_ring_count(mol: Molecule) -> int:
    return sum(1 for r in mol.rings if all(mol.atoms[i].aromatic for i in r))


def qed_descriptors(mol: Molecule, alerts: dict[str, Group] | None = None,
                    hbd_mode: str = "donors") -> DescriptorVector:
    """The eight QED inputs.

    HBA counts N and O atoms. HBD counts N/O atoms bearing at least one
    hydrogen (``hbd_mode="donors"``) or, with ``hbd_mode="hydrogens"``, the
    number of N-H and O-H hydrogens.
    """
    hba = sum(1 for a in mol.atoms if a.element in ("N", "O"))
    polar = [a for a in mol.atoms if a.element in ("N", "O")]
    if hbd_mode == "donors":
        hbd = sum(1 for a in polar if a.total_h > 0)
    elif hbd_mode == "hydrogens":
        hbd = sum(a.total_h for a in polar)
    else:
        raise ValueError(f"unknown hbd_mode {hbd_mode!r}")
    n_alerts = 0
    for g in (alerts or {}).values():
        n_alerts += match_count(mol, g.pattern)
    return DescriptorVector(mw=mol_weight(mol), alogp=crippen_logp(mol), hba=hba, hbd=hbd,
                            tpsa=tpsa(mol), rotb=rotatable_bonds(mol),
                            arom=aromatic_ring_count(mol), alerts=n_alerts)


def ads(x: float, p: tuple[float, ...]) -> float:
    """Asymmetric double sigmoid desirability, scaled by its maximum."""
    a, b, c, d, e, f, dmax = p[:7]
    exp1 = 1.0 + math.exp(min(700.0, -(x - c + d / 2.0) / e))
    exp2 = 1.0 + math.exp(min(700.0, -(x - c - d / 2.0) / f))
    return (a + b / exp1 * (1.0 - 1.0 / exp2)) / dmax


def qed_from_descriptors(desc: DescriptorVector, weights: str = "mean") -> float:
    params = qed_params()
    col = {"mean": 7, "max": 8}[weights]
    num = den = 0.0
    for name, x in zip(QED_NAMES, desc.as_tuple()):
        p = params[name]
        w = p[col]
        if w == 0.0:
            continue
        num += w * math.log(ads(x, p))
        den += w
    return math.exp(num / den)


_QED_CACHE: dict[tuple[str, str], float] = {}


def qed(mol: Molecule, weights: str = "mean", alerts: dict[str, Group] | None = None) -> float:
    """Weighted geometric mean of the eight descriptor desirabilities."""
    key = (mol.canonical_smiles, weights)
    if alerts is None and key in _QED_CACHE:
        return _QED_CACHE[key]
    value = qed_from_descriptors(qed_descriptors(mol, alerts), weights)
    if alerts is None:
        if len(_QED_CACHE) > 200_000:
            _QED_CACHE.clear()
        _QED_CACHE[key] = value
    return value


def property_value(pid: PropertyId | str, mol: Molecule) -> float:
    """F(m) for a property id."""
    pid = PropertyId(pid)
    if pid is PropertyId.LOGP:
        return crippen_logp(mol)
    if pid is PropertyId.MR:
        return crippen_mr(mol)
    if pid is PropertyId.QED:
        return qed(mol)
    if pid is PropertyId.TPSA:
        return tpsa(mol)
    return mol_weight(mol)
