"""Circular (ECFP-style) bit fingerprints and Tanimoto similarity.

Identifiers are 64-bit FNV-1a hashes of little-endian int64 encodings, so bit
positions are identical on every platform and run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .mol import Molecule

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


class WidthMismatch(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK
    return h


def hash_ints(values) -> int:
    """FNV-1a over the int64 little-endian encoding of ``values``."""
    signed = [v - (1 << 64) if v >= (1 << 63) else v for v in values]
    return fnv1a64(struct.pack(f"<{len(signed)}q", *signed))


@dataclass(frozen=True)
class Fingerprint:
    bits: int
    width: int = 2048
    radius: int = 2

    def __post_init__(self):
        if self.width <= 0 or self.width & (self.width - 1):
            raise ValueError(f"width must be a power of two, got {self.width}")

    @property
    def nbits_set(self) -> int:
        return self.bits.bit_count()

    def on_bits(self) -> list[int]:
        out, b = [], self.bits
        while b:
            low = b & -b
            out.append(low.bit_length() - 1)
            b ^= low
        return out

    def to_hex(self) -> str:
        return f"{self.width}:{self.radius}:{self.bits:0{self.width // 4}x}"

    @classmethod
    def from_hex(cls, text: str) -> "Fingerprint":
        w, r, h = text.strip().split(":")
        return cls(int(h, 16), int(w), int(r))


def atom_invariants(mol: Molecule) -> list[int]:
    """Radius-0 identifiers: hash of (Z, degree, charge, total H, ring, aromatic)."""
    return [hash_ints((0, a.atomic_number, mol.degree(i), a.formal_charge, a.total_h,
                       int(a.ring_member), int(a.aromatic)))
            for i, a in enumerate(mol.atoms)]


def circular_identifiers(mol: Molecule, radius: int = 2) -> list[list[int]]:
    """Per-layer lists of per-atom identifiers (layer 0 .. radius)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    layers = [atom_invariants(mol)]
    for r in range(1, radius + 1):
        prev = layers[-1]
        nxt = []
        for i in range(len(mol.atoms)):
            env = sorted((mol.bonds[k].order.code, prev[j]) for j, k in mol.adjacency[i])
            flat = [r, prev[i]]
            for code, ident in env:
                flat.extend((code, ident))
            nxt.append(hash_ints(flat))
        layers.append(nxt)
    return layers


def morgan_fp(mol: Molecule, radius: int = 2, width: int = 2048) -> Fingerprint:
    """Fold every per-atom, per-radius identifier into a ``width``-bit set."""
    bits = 0
    for layer in circular_identifiers(mol, radius):
        for ident in layer:
            bits |= 1 << (ident % width)
    return Fingerprint(bits, width, radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a & b| / |a | b|; 1.0 for two empty fingerprints."""
    if a.width != b.width or a.radius != b.radius:
        raise WidthMismatch(f"{a.width}/{a.radius} vs {b.width}/{b.radius}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


_FP_CACHE: dict[tuple[str, int, int], Fingerprint] = {}


def cached_fp(mol: Molecule, radius: int = 2, width: int = 2048) -> Fingerprint:
    """Fingerprint memoized on canonical SMILES (fingerprints are graph invariants)."""
    key = (mol.canonical_smiles, radius, width)
    fp = _FP_CACHE.get(key)
    if fp is None:
        if len(_FP_CACHE) > 200_000:
            _FP_CACHE.clear()
        fp = _FP_CACHE[key] = morgan_fp(mol, radius, width)
    return fp


def similarity(a: Molecule, b: Molecule, radius: int = 2, width: int = 2048) -> float:
    return tanimoto(cached_fp(a, radius, width), cached_fp(b, radius, width))
