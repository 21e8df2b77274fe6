import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from molrepo.bench import seed_molecules
from molrepo.mol import BondOrder, parse_smiles, permute
from molrepo.patterns import (PatternSyntaxError, UnsupportedFeature, check_library, count_group,
                              group_library, group_pattern, load_groups, match_count, parse_pattern)


def test_hydroxyl_forms():
    pat = parse_pattern("[O;D1;H1]")
    assert match_count(parse_smiles("CCO"), pat) == 1
    assert match_count(parse_smiles("CCOC"), pat) == 0


def test_aromatic_ch():
    pat = parse_pattern("[cH]")
    assert match_count(parse_smiles("c1ccccc1"), pat) == 6
    assert match_count(parse_smiles("Cc1ccccc1"), pat) == 5
    assert match_count(parse_smiles("C1CCCCC1"), pat) == 0


@pytest.mark.parametrize("text", ["[C$(ring)]", "C.C", "[C@H]"])
def test_unsupported(text):
    with pytest.raises(UnsupportedFeature):
        parse_pattern(text)


@pytest.mark.parametrize("text", ["", "C(", "C1CC", "[CH", "C="])
def test_syntax_errors(text):
    with pytest.raises(PatternSyntaxError):
        parse_pattern(text)


def test_library_counts():
    assert count_group(parse_smiles("CCO"), "hydroxyl") == 1
    assert count_group(parse_smiles("CCO"), "halogen_cl") == 0
    assert count_group(parse_smiles("c1ccc2ccccc2c1"), "benzene") == 2


def test_library_complete_and_sound():
    lib = group_library()
    for name in ("hydroxyl", "carboxyl", "aldehyde", "ketone", "amide", "amine", "nitro",
                 "halogen_f", "halogen_cl", "halogen_br", "halogen_i", "benzene", "thiol", "ester"):
        assert name in lib
    assert check_library() == []
    for g in lib.values():
        assert match_count(parse_smiles(g.exemplar), g.pattern) >= 1


def test_load_groups_rejects_bad_removed_index():
    with pytest.raises(PatternSyntaxError):
        load_groups("x\t[OH]\tO\tCO\t3\n")


def _brute_force_count(mol, pat):
    """Enumerate every injective atom assignment and check all predicates."""
    from molrepo.patterns import _bond_ok, _compile
    preds = [_compile(node) for node in pat.atoms]
    found = set()
    for combo in itertools.permutations(range(len(mol)), len(pat)):
        if not all(p(mol, i) for p, i in zip(preds, combo)):
            continue
        ok = True
        for a, b, kind in pat.bonds:
            bond = mol.bond_between(combo[a], combo[b])
            if bond is None or not _bond_ok(kind, bond.order):
                ok = False
                break
        if ok:
            found.add(frozenset(combo))
    return len(found)


@pytest.mark.parametrize("smiles,group", [
    ("c1ccc2ccccc2c1", "benzene"), ("OCC(O)CO", "hydroxyl"), ("CC(=O)OCC(=O)O", "carboxyl"),
    ("CC(=O)OCC(=O)O", "ester"), ("NCCC(N)=O", "amide"), ("NCCC(N)=O", "amine"),
])
def test_counts_match_brute_force(smiles, group):
    m = parse_smiles(smiles)
    pat = group_pattern(group)
    assert match_count(m, pat) == _brute_force_count(m, pat)


POOL = [m.canonical_smiles for m in seed_molecules()]
GROUPS = sorted(group_library())


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(POOL), st.sampled_from(GROUPS), st.randoms(use_true_random=False))
def test_count_invariant_under_relabelling(smiles, group, rnd):
    m = parse_smiles(smiles)
    perm = list(range(len(m)))
    rnd.shuffle(perm)
    assert count_group(permute(m, perm), group) == count_group(m, group)
