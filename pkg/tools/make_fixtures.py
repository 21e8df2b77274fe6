"""Build the committed test fixtures with RDKit as the independent oracle.

Run once from the repository root: ``python3 tools/make_fixtures.py``.
RDKit is only needed here; the package itself never imports it.

Outputs (tests/data/):
  descriptor_fixtures.json  50 molecules with RDKit Crippen LogP/MR, TPSA, QED
  valid_corpus.tsv          >= 500 valid SMILES spellings with a molecule group id
  invalid_corpus.tsv        >= 100 invalid strings with the expected error class
"""

import json
import random
from pathlib import Path

from rdkit import Chem, RDLogger, rdBase
from rdkit.Chem import Crippen, QED, rdMolDescriptors

from molrepo.mol import parse_smiles, random_smiles

RDLogger.DisableLog("rdApp.*")
ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "tests" / "data"


def curated():
    out = []
    for line in (ROOT / "tools" / "curated.smi").read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            smi, _, name = line.partition(" ")
            out.append((smi, name.strip()))
    return out


def rdkit_canonical(smi):
    m = Chem.MolFromSmiles(smi)
    return None if m is None else Chem.MolToSmiles(m)


def aromaticity_agrees(smi):
    """RDKit reads our canonical spelling as the same molecule it reads from the source."""
    ours = parse_smiles(smi).canonical_smiles
    return rdkit_canonical(ours) == rdkit_canonical(smi)


def descriptor_fixtures():
    rows = []
    for smi, name in curated():
        m = Chem.MolFromSmiles(smi)
        heavy = m.GetNumHeavyAtoms()
        props = QED.properties(m)
        if not 5 <= heavy <= 30 or props.ALERTS != 0 or not aromaticity_agrees(smi):
            continue
        rows.append((smi, name, m, props))
    rng = random.Random(0)
    picked = rng.sample(rows, 50)
    items = []
    for smi, name, m, props in picked:
        items.append({
            "smiles": smi, "name": name,
            "logp": Crippen.MolLogP(m), "mr": Crippen.MolMR(m),
            "tpsa": rdMolDescriptors.CalcTPSA(m),
            "qed": QED.qed(m, qedProperties=props._replace(ALERTS=0)),
            "rdkit_qed_raw": QED.qed(m), "rdkit_alerts": props.ALERTS,
        })
    return {
        "provenance": {
            "oracle": f"RDKit {rdBase.rdkitVersion}",
            "functions": "Crippen.MolLogP, Crippen.MolMR, rdMolDescriptors.CalcTPSA, "
                         "QED.qed with the ALERTS property forced to 0",
            "selection": "tools/curated.smi entries with 5-30 heavy atoms, zero RDKit QED "
                         "alerts, and identical RDKit canonical forms for the source SMILES and "
                         "this package's canonical spelling; 50 drawn with random.Random(0).sample",
            "generator": "tools/make_fixtures.py",
        },
        "molecules": items,
    }


HANDMADE_VALID = [
    "[13CH4]", "[2H]C([2H])([2H])O", "C[C@H](N)C(=O)O", "C[C@@H](O)CC", "F/C=C/F", "F/C=C\\F",
    "C1CC%10CC1%10", "C%11CC%11", "c1ccc2cc%13ccccc%13cc2c1", "[NH4+].[Cl-]".split(".")[0],
    "[O-][N+](=O)c1ccccc1", "C[N+](C)(C)C", "[nH]1cccc1", "c1cc[nH]c1", "O=C1NC(=O)c2ccccc12",
    "C1=CC=CC=C1", "C1=CC=C2C=CC=CC2=C1", "OC(=O)[C@@H]1CCCN1", "CC(C)(C)c1ccc(O)cc1",
    "C#N", "C=C=C", "CC#CC", "[OH-]", "[CH2]=O".replace("[CH2]", "C"), "S(=O)(=O)(O)O",
    "P(=O)(O)(O)O", "CS(C)=O", "B(O)(O)c1ccccc1", "Brc1ccccc1", "ClC(Cl)(Cl)Cl", "IC", "N#[N+][O-]",
    "C(=O)=O", "c1ccsc1", "c1ccoc1", "c1ncncn1", "n1ccccc1", "C1CC1", "C12CC1C2", "[C@@H]1(O)CCCC1",
    "OC[C@H]1O[C@@H](O)[C@H](O)[C@@H](O)[C@@H]1O", "N[C@@H](Cc1c[nH]c2ccccc12)C(=O)O",
]


def valid_corpus():
    rows, group = [], 0
    for smi, _ in curated():
        if not aromaticity_agrees(smi):
            continue
        mol = parse_smiles(smi)
        spellings = {smi, mol.canonical_smiles}
        rng = random.Random(group)
        for _ in range(2):
            spellings.add(random_smiles(mol, rng))
        m = Chem.MolFromSmiles(smi)
        rd_random = Chem.MolToSmiles(m, doRandom=True, canonical=False)
        # Kekule input is perceived aromatic only for benzene-like 6-rings of neutral C/N
        # with no exocyclic double bond, so the Kekule spelling joins the group only
        # when every aromatic atom is in such a ring.
        km = Chem.MolFromSmiles(smi)
        Chem.Kekulize(km, clearAromaticFlags=True)
        six_only = True
        for a in m.GetAtoms():
            if not a.GetIsAromatic():
                continue
            ka = km.GetAtomWithIdx(a.GetIdx())
            exo = any(b.GetBondType() == Chem.BondType.DOUBLE and not b.IsInRing()
                      for b in ka.GetBonds())
            if (a.GetSymbol() not in ("C", "N") or a.GetFormalCharge() or exo
                    or not a.IsInRingSize(6) or a.IsInRingSize(5)):
                six_only = False
        kekule = Chem.MolToSmiles(km, kekuleSmiles=True)
        for s in sorted(spellings):
            rows.append((s, str(group)))
        # RDKit re-spellings carry RDKit's aromaticity, which matches ours only within that scope
        if rd_random not in spellings:
            rows.append((rd_random, str(group) if six_only else f"{group}r"))
        if kekule not in spellings:
            rows.append((kekule, str(group) if six_only else f"{group}k"))
        group += 1
    for s in HANDMADE_VALID:
        if Chem.MolFromSmiles(s) is None:
            raise SystemExit(f"RDKit rejects handmade valid SMILES {s!r}")
        rows.append((s, str(group)))
        group += 1
    return rows


def invalid_corpus():
    rows = []
    hand = [
        ("", "SmilesSyntaxError"), ("C(", "SmilesSyntaxError"), ("C)C", "SmilesSyntaxError"),
        ("C()C", "SmilesSyntaxError"), ("CC=", "SmilesSyntaxError"), ("C==C", "SmilesSyntaxError"),
        ("[NH4+", "SmilesSyntaxError"), ("C[N", "SmilesSyntaxError"), ("Xy", "SmilesSyntaxError"),
        ("C?C", "SmilesSyntaxError"), ("(C)C", "SmilesSyntaxError"), ("C%1C", "SmilesSyntaxError"),
        ("[]", "SmilesSyntaxError"), ("C[Zz]C", "SmilesSyntaxError"), ("=CC", "SmilesSyntaxError"),
        ("C1CC", "RingClosureError"), ("C1CC2CC1", "RingClosureError"), ("C11", "RingClosureError"),
        ("C12CC12", "RingClosureError"), ("C%12CC", "RingClosureError"),
        ("C(C)(C)(C)(C)C", "ValenceError"), ("O(C)(C)C", "ValenceError"),
        ("FC(F)(F)(F)F", "ValenceError"), ("C=C(C)(C)C", "ValenceError"),
        ("N(C)(C)(C)C", "ValenceError"), ("F=C", "ValenceError"), ("Cl(C)C", "ValenceError"),
        ("C#C#C", "ValenceError"), ("[CH5]", "ValenceError"), ("O=O=O", "ValenceError"),
        ("c1cccc1", "AromaticityError"), ("Cc", "AromaticityError"), ("c1ccccc1c", "AromaticityError"),
        ("c1cccccc1", "AromaticityError"),
        ("CC.O", "FragmentError"), ("C.C", "FragmentError"), ("[NH4+].[Cl-]", "FragmentError"),
    ]
    rows.extend(hand)
    # systematic corruptions of curated molecules; the class follows from the corruption
    mols = [s for s, _ in curated() if "%" not in s][:40]
    for s in mols:
        rows.append((s + "(", "SmilesSyntaxError"))
        rows.append((s + "9", "RingClosureError") if "9" not in s else (s + "(", "SmilesSyntaxError"))
        rows.append(("C(C)(C)(C)(C)" + s, "ValenceError"))
        rows.append((s + ".O", "FragmentError"))
    seen, out = set(), []
    for s, cls in rows:
        if s in seen:
            continue
        seen.add(s)
        if cls != "FragmentError" and Chem.MolFromSmiles(s) is not None and s != "":
            raise SystemExit(f"RDKit accepts supposedly invalid {s!r}")
        out.append((s, cls))
    return out


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    fx = descriptor_fixtures()
    (OUT / "descriptor_fixtures.json").write_text(json.dumps(fx, indent=1) + "\n")
    valid = valid_corpus()
    with open(OUT / "valid_corpus.tsv", "w") as fh:
        fh.write("# smiles<TAB>molecule group (spellings in one group denote the same molecule)\n")
        for s, g in valid:
            fh.write(f"{s}\t{g}\n")
    invalid = invalid_corpus()
    with open(OUT / "invalid_corpus.tsv", "w") as fh:
        fh.write("# smiles<TAB>expected error class (empty SMILES written as an empty field)\n")
        for s, cls in invalid:
            fh.write(f"{s}\t{cls}\n")
    print(f"{len(fx['molecules'])} descriptor fixtures, {len(valid)} valid, {len(invalid)} invalid")


if __name__ == "__main__":
    main()
