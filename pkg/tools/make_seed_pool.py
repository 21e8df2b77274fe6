"""Write src/molrepo/data/seed_pool.smi from tools/curated.smi.

Keeps every curated molecule with 5-30 heavy atoms, in canonical form, in
file order, dropping canonical duplicates.
"""

from pathlib import Path

from molrepo.mol import parse_smiles

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    seen, lines = set(), []
    for line in (ROOT / "tools" / "curated.smi").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        mol = parse_smiles(line.split()[0])
        smi = mol.canonical_smiles
        if 5 <= len(mol.atoms) <= 30 and smi not in seen:
            seen.add(smi)
            lines.append(smi)
    header = ["# Seed pool: curated drug-like and building-block molecules, 5-30 heavy atoms.",
              "# Generated by tools/make_seed_pool.py from tools/curated.smi; one SMILES per line."]
    out = ROOT / "src" / "molrepo" / "data" / "seed_pool.smi"
    out.write_text("\n".join(header + lines) + "\n")
    print(f"wrote {len(lines)} molecules to {out}")


if __name__ == "__main__":
    main()
