"""Task generation with brute-force reference oracles, corruption and evaluation."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Iterator

import numpy as np

from .fp import similarity
from .mol import (BondOrder, Molecule, RawAtom, RawGraph, SmilesError, build_molecule,
                  canonical_ranks, parse_raw, parse_smiles, to_raw, write_canonical)
from .patterns import group_library, iter_matches
from .props import PropertyId, property_value
from .reward import best_of_k, metrics, r_prop_binary
from .tasks import DOWN, UP, TaskKind, TaskSpec


class Infeasible(RuntimeError):
    """No candidate edit satisfies the task predicate within the similarity bound."""


# ------------------------------------------------------------------ seed pool

@lru_cache(maxsize=1)
def seed_molecules() -> tuple[Molecule, ...]:
    """The embedded pool of small drug-like seeds (5-30 heavy atoms, distinct)."""
    text = resources.files("molrepo").joinpath("data", "seed_pool.smi").read_text()
    out, seen = [], set()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            mol = parse_smiles(line.split()[0])
        except SmilesError as exc:
            raise ValueError(f"seed_pool.smi line {n}: {exc}") from exc
        if not 5 <= len(mol.atoms) <= 30:
            raise ValueError(f"seed_pool.smi line {n}: {len(mol.atoms)} heavy atoms")
        if mol.canonical_smiles in seen:
            raise ValueError(f"seed_pool.smi line {n}: duplicate molecule")
        seen.add(mol.canonical_smiles)
        out.append(mol)
    return tuple(out)


# ------------------------------------------------------------------ editing

SUB_ELEMENTS = ("C", "N", "O", "S", "F", "Cl", "Br")
AROMATIC_SUB_ELEMENTS = ("C", "N")
ATTACH_ELEMENTS = ("C", "N", "O", "S", "F", "Cl", "Br")
_ORDERS = (BondOrder.SINGLE, BondOrder.DOUBLE, BondOrder.TRIPLE)


@lru_cache(maxsize=None)
def _fragment_raw(smiles: str) -> RawGraph:
    return parse_raw(smiles)


def attach_fragments() -> tuple[str, ...]:
    """Multi-atom (or non-element-set) library fragments used as attachments."""
    frags = []
    for g in group_library().values():
        if g.fragment in ATTACH_ELEMENTS or g.fragment in frags:
            continue
        frags.append(g.fragment)
    return tuple(frags)


def _open_site(mol: Molecule, i: int) -> bool:
    a = mol.atoms[i]
    return not a.bracket and a.implicit_h > 0


def attach(raw: RawGraph, site: int, fragment: str | RawGraph) -> RawGraph:
    """Bond ``fragment`` (through its first atom) to ``site`` with a single bond."""
    frag = _fragment_raw(fragment) if isinstance(fragment, str) else fragment
    off = len(raw.atoms)
    atoms = raw.atoms + [replace(a) for a in frag.atoms]
    bonds = raw.bonds + [(a + off, b + off, o) for a, b, o in frag.bonds]
    bonds.append((site, off, BondOrder.SINGLE))
    return RawGraph(atoms, bonds)


def delete_atoms(raw: RawGraph, drop) -> RawGraph:
    """Remove atoms (and their bonds), renumbering the rest."""
    drop = set(drop)
    keep = [i for i in range(len(raw.atoms)) if i not in drop]
    new = {old: k for k, old in enumerate(keep)}
    atoms = [raw.atoms[i] for i in keep]
    bonds = [(new[a], new[b], o) for a, b, o in raw.bonds if a in new and b in new]
    return RawGraph(atoms, bonds)


def _raw_edits(mol: Molecule) -> Iterator[RawGraph]:
    """Every single edit as an unvalidated raw graph."""
    raw = to_raw(mol)
    n = len(mol.atoms)
    for i, a in enumerate(mol.atoms):
        if a.bracket:
            continue
        pool = AROMATIC_SUB_ELEMENTS if a.aromatic else SUB_ELEMENTS
        for e in pool:
            if e == a.element:
                continue
            atoms = list(raw.atoms)
            atoms[i] = RawAtom(e, a.aromatic)
            yield RawGraph(atoms, raw.bonds)
    for i in range(n):
        if not _open_site(mol, i):
            continue
        for e in ATTACH_ELEMENTS:
            yield RawGraph(raw.atoms + [RawAtom(e)], raw.bonds + [(i, n, BondOrder.SINGLE)])
        for frag in attach_fragments():
            yield attach(raw, i, frag)
    if n > 1:
        for i in range(n):
            if mol.degree(i) == 1:
                yield delete_atoms(raw, (i,))
    for k, b in enumerate(mol.bonds):
        if b.order == BondOrder.AROMATIC:
            continue
        for o in _ORDERS:
            if o != b.order:
                bonds = list(raw.bonds)
                bonds[k] = (b.begin, b.end, o)
                yield RawGraph(raw.atoms, bonds)


def single_edits(mol: Molecule) -> dict[str, Molecule]:
    """Valence-valid results of one edit, keyed by canonical SMILES (m itself excluded)."""
    out: dict[str, Molecule] = {}
    own = mol.canonical_smiles
    for g in _raw_edits(mol):
        try:
            cand = build_molecule(g)
        except SmilesError:
            continue
        key = cand.canonical_smiles
        if key != own and key not in out:
            out[key] = cand
    return out


def enumerate_edits(m: Molecule, depth: int = 1) -> dict[str, Molecule]:
    """All distinct molecules reachable from ``m`` by 1 (or up to 2) edits.

    The edit set: change one non-bracket atom's element (aromatic atoms only
    between C and N), attach an atom or library fragment by a single bond at
    an atom with implicit hydrogens, delete a terminal atom, or change the
    order of one non-aromatic bond. ``m`` itself is never returned.
    """
    if depth not in (1, 2):
        raise ValueError("depth must be 1 or 2")
    first = single_edits(m)
    if depth == 1:
        return dict(sorted(first.items()))
    out = dict(first)
    own = m.canonical_smiles
    for cand in first.values():
        for key, mol2 in single_edits(cand).items():
            if key != own and key not in out:
                out[key] = mol2
    return dict(sorted(out.items()))


# ------------------------------------------------------------------ oracles

# Per-property scales used to add up improvements in multi-property tasks.
PROPERTY_SCALE = {PropertyId.LOGP: 1.0, PropertyId.MR: 10.0, PropertyId.QED: 0.1,
                  PropertyId.TPSA: 20.0, PropertyId.MW: 50.0}


def directed_gain(kind: TaskKind, m: Molecule, m0: Molecule) -> tuple[float, bool]:
    """(scaled directed improvement, every objective strictly improved)."""
    total, strict = 0.0, True
    for pid, d in kind.objectives:
        diff = property_value(pid, m) - property_value(pid, m0)
        if d == DOWN:
            diff = -diff
        strict = strict and diff > 0
        total += diff / PROPERTY_SCALE[pid]
    return total, strict


def _property_oracle(kind: TaskKind, m0: Molecule, delta: float) -> Molecule:
    best_key, best = None, None
    for smi, cand in enumerate_edits(m0, 2).items():
        sim = similarity(cand, m0)
        if sim < delta:
            continue
        gain, strict = directed_gain(kind, cand, m0)
        if not strict:
            continue
        # maximise gain, then similarity, then prefer the lexicographically smaller SMILES
        key = (gain, sim, [-ord(c) for c in smi], -len(smi))
        if best_key is None or key > best_key:
            best_key, best = key, cand
    if best is None:
        raise Infeasible(f"{kind.name}: no depth-2 edit of {m0.canonical_smiles} improves "
                         f"the target with similarity >= {delta}")
    return best


def _rank_order(mol: Molecule) -> list[int]:
    ranks = canonical_ranks(mol)
    return sorted(range(len(mol.atoms)), key=lambda i: ranks[i])


def _ordered_matches(mol: Molecule, group) -> list[tuple[int, ...]]:
    """Distinct matches of a group, ordered by the canonical ranks of their atoms."""
    ranks = canonical_ranks(mol)
    seen, out = set(), []
    for match in iter_matches(mol, group.pattern):
        key = frozenset(match)
        if key not in seen:
            seen.add(key)
            out.append(match)
    out.sort(key=lambda mt: sorted(ranks[i] for i in mt))
    return out


def _try_build(raw: RawGraph) -> Molecule | None:
    try:
        return build_molecule(raw)
    except SmilesError:
        return None


def _structure_candidates(kind: TaskKind, m0: Molecule) -> Iterator[Molecule]:
    lib = group_library()
    if kind.family == "add":
        frag = lib[kind.groups[0]].fragment
        raw = to_raw(m0)
        for site in _rank_order(m0):
            if _open_site(m0, site):
                cand = _try_build(attach(raw, site, frag))
                if cand is not None:
                    yield cand
        return
    old = lib[kind.groups[0]]
    ranks = canonical_ranks(m0)
    for match in _ordered_matches(m0, old):
        drop = {match[k] for k in old.removed}
        removed = delete_atoms(to_raw(m0), drop)
        if kind.family == "del":
            cand = _try_build(removed)
            if cand is not None:
                yield cand
            continue
        # sub: attach the new group where the old one was bonded
        sites = sorted({j for i in drop for j in m0.neighbors(i) if j not in drop},
                       key=lambda j: ranks[j])
        keep = [i for i in range(len(m0.atoms)) if i not in drop]
        renum = {old_i: k for k, old_i in enumerate(keep)}
        for site in sites:
            cand = _try_build(attach(removed, renum[site], lib[kind.groups[1]].fragment))
            if cand is not None:
                yield cand


def _structure_oracle(kind: TaskKind, m0: Molecule, delta: float) -> Molecule:
    for cand in _structure_candidates(kind, m0):
        if r_prop_binary(kind, cand, m0) == 1 and similarity(cand, m0) >= delta:
            return cand
    raise Infeasible(f"{kind.name}: no valid edit of {m0.canonical_smiles} with "
                     f"similarity >= {delta}")


_ORACLE_CACHE: dict[tuple[str, str, float], Molecule] = {}


def oracle_reference(kind: TaskKind | str, m0: Molecule, delta: float = 0.5) -> Molecule:
    """Reference molecule for a task.

    Property tasks: the depth-2 edit with the largest directed improvement
    among those with strict improvement and similarity >= ``delta``; ties go
    to higher similarity, then the lexicographically smaller canonical SMILES.
    Structure tasks: the deterministic group edit applied at the first site
    (canonical order) whose result satisfies the task and the similarity bound.
    """
    kind = TaskKind.parse(kind) if isinstance(kind, str) else kind
    key = (kind.name, m0.canonical_smiles, float(delta))
    hit = _ORACLE_CACHE.get(key)
    if hit is None:
        if kind.is_property:
            hit = _property_oracle(kind, m0, delta)
        else:
            hit = _structure_oracle(kind, m0, delta)
        _ORACLE_CACHE[key] = hit
    return hit


# ------------------------------------------------------------------ datasets

TEMPLATES: dict[str, tuple[str, ...]] = {
    "prop": (
        "Modify the molecule {smiles} to {verb} its {prop} value.",
        "Please make a small edit to {smiles} so that {prop} goes {direction}.",
        "Given {smiles}, propose a similar molecule with {comparative} {prop}.",
        "Optimize {smiles}: the goal is to {verb} {prop} while keeping the scaffold.",
    ),
    "multi": (
        "Modify the molecule {smiles} to {objectives}.",
        "Edit {smiles} slightly so that you {objectives}.",
        "Starting from {smiles}, find a close analogue and {objectives}.",
        "Adjust {smiles}: {objectives}, staying structurally similar.",
    ),
    "add": (
        "Add {a_group} group to the molecule {smiles}.",
        "Please attach one {group} group to {smiles}.",
        "Modify {smiles} by introducing {a_group} group.",
        "Starting from {smiles}, install an additional {group}.",
    ),
    "del": (
        "Remove {a_group} group from the molecule {smiles}.",
        "Please delete one {group} group from {smiles}.",
        "Modify {smiles} by taking away {a_group} group.",
        "Starting from {smiles}, strip one {group} group.",
    ),
    "sub": (
        "Replace {a_old} group in {smiles} with {a_new} group.",
        "Please swap one {old} group of {smiles} for {a_new} group.",
        "Modify {smiles} by substituting {old} with {new}.",
        "Starting from {smiles}, exchange {a_old} group for {a_new} group.",
    ),
}
N_TEMPLATES = 4


_DISPLAY = {"halogen_f": "fluoro", "halogen_cl": "chloro", "halogen_br": "bromo",
            "halogen_i": "iodo"}


def _display(group: str) -> str:
    return _DISPLAY.get(group, group.replace("_", " "))


def _article(word: str) -> str:
    return ("an " if word[0] in "aeiou" else "a ") + word


def _template_family(kind: TaskKind) -> str:
    return "prop" if kind.family in ("prop_up", "prop_down") else kind.family


def render_instruction(kind: TaskKind, m0: Molecule, template_id: int) -> str:
    tpl = TEMPLATES[_template_family(kind)][template_id]
    smi = write_canonical(m0)
    fields = {"smiles": smi}
    if kind.objectives:
        pid, d = kind.objectives[0]
        fields.update(prop=pid.value, direction=d,
                      verb="increase" if d == UP else "decrease",
                      comparative="higher" if d == UP else "lower")
        fields["objectives"] = " and ".join(
            f"{'increase' if dd == UP else 'decrease'} {p.value}" for p, dd in kind.objectives)
    if kind.groups:
        old, new = _display(kind.groups[0]), _display(kind.groups[-1])
        fields.update(group=old, old=old, new=new, a_group=_article(old),
                      a_old=_article(old), a_new=_article(new))
    return tpl.format(**fields)


def _eligible(kind: TaskKind, m0: Molecule) -> bool:
    from .patterns import count_group
    if kind.family in ("del", "sub"):
        return count_group(m0, kind.groups[0]) > 0
    if kind.family == "add":
        return any(_open_site(m0, i) for i in range(len(m0.atoms)))
    return True


DEFAULT_KINDS = ("prop_up_logp", "prop_down_logp", "prop_up_qed", "prop_up_mr",
                 "add_hydroxyl", "add_amine", "del_hydroxyl", "del_halogen_cl",
                 "sub_hydroxyl_to_amine", "sub_halogen_cl_to_halogen_f",
                 "multi_logp_up_qed_up", "multi_logp_down_mr_up")


def gen_dataset(n: int, kinds=DEFAULT_KINDS, seed: int = 0, *, delta: float = 0.5,
                template_ids=None, pool=None, max_atoms: int | None = None,
                augment: float = 0.0, max_tries: int = 60, id_prefix: str = "t") -> list[TaskSpec]:
    """``n`` tasks cycling through ``kinds``; a pure function of its arguments.

    m0 is drawn from the pool (optionally restricted to ``max_atoms`` heavy
    atoms); with probability ``augment`` it is replaced by a random one-edit
    neighbour. Infeasible draws are resampled up to ``max_tries`` times.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    kinds = [TaskKind.parse(k) if isinstance(k, str) else k for k in kinds]
    if not kinds:
        raise ValueError("at least one task kind is required")
    tids = tuple(range(N_TEMPLATES)) if template_ids is None else tuple(template_ids)
    if not tids or any(not 0 <= t < N_TEMPLATES for t in tids):
        raise ValueError(f"template ids must lie in 0..{N_TEMPLATES - 1}")
    pool = list(seed_molecules() if pool is None else pool)
    if max_atoms is not None:
        pool = [m for m in pool if len(m.atoms) <= max_atoms]
    rng = random.Random(seed)
    out = []
    for idx in range(n):
        kind = kinds[idx % len(kinds)]
        eligible = [m for m in pool if _eligible(kind, m)]
        if not eligible:
            raise Infeasible(f"no pool molecule is eligible for {kind.name}")
        for _ in range(max_tries):
            m0 = eligible[rng.randrange(len(eligible))]
            if augment and rng.random() < augment:
                nbrs = [m for m in single_edits(m0).values()
                        if (max_atoms is None or len(m.atoms) <= max_atoms) and _eligible(kind, m)]
                if nbrs:
                    m0 = nbrs[rng.randrange(len(nbrs))]
            try:
                m_ref = oracle_reference(kind, m0, delta)
            except Infeasible:
                continue
            break
        else:
            raise Infeasible(f"{kind.name}: no feasible task after {max_tries} draws")
        tid = tids[rng.randrange(len(tids))]
        out.append(TaskSpec(id=f"{id_prefix}{idx:05d}", kind=kind, m0=m0, m_ref=m_ref,
                            instruction=render_instruction(kind, m0, tid), delta=delta,
                            template_id=tid))
    return out


def gen_split(n_train: int, n_eval: int, kinds=DEFAULT_KINDS, seed: int = 0, *,
              eval_fraction: float = 0.2, unseen_eval: bool = False,
              **kw) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Train and eval datasets drawn from disjoint parts of the seed pool.

    The pool is shuffled with ``seed`` and its first ``eval_fraction`` goes to
    evaluation. With ``unseen_eval`` the eval set uses only the last
    instruction template and the train set only the others.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie strictly between 0 and 1")
    pool = sorted(kw.pop("pool", None) or seed_molecules(), key=lambda m: m.canonical_smiles)
    random.Random(seed).shuffle(pool)
    cut = max(1, int(round(eval_fraction * len(pool))))
    eval_pool, train_pool = pool[:cut], pool[cut:]
    if unseen_eval:
        train_t, eval_t = tuple(range(N_TEMPLATES - 1)), (N_TEMPLATES - 1,)
    else:
        train_t = eval_t = tuple(range(N_TEMPLATES))
    train = gen_dataset(n_train, kinds, seed, template_ids=train_t, pool=train_pool,
                        id_prefix="train", **kw)
    evals = gen_dataset(n_eval, kinds, seed + 1, template_ids=eval_t, pool=eval_pool,
                        id_prefix="eval", **kw) if n_eval > 0 else []
    return train, evals


def dumps_dataset(tasks: list[TaskSpec]) -> str:
    return "".join(json.dumps(t.to_json(), sort_keys=True) + "\n" for t in tasks)


def write_dataset(tasks: list[TaskSpec], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_dataset(tasks))


def read_dataset(path) -> list[TaskSpec]:
    with open(path, encoding="utf-8") as fh:
        return [TaskSpec.from_json(json.loads(line)) for line in fh if line.strip()]


def check_dataset(tasks: list[TaskSpec]) -> list[str]:
    """Ids of tasks whose reference fails its predicate or the similarity bound."""
    bad = []
    for t in tasks:
        if r_prop_binary(t, t.m_ref) != 1 or similarity(t.m_ref, t.m0) < t.delta:
            bad.append(t.id)
    return bad


# ------------------------------------------------------------------ ablations

def corrupt(tasks: list[TaskSpec], p: float, seed: int = 0) -> list[TaskSpec]:
    """Misalign references: per kind, floor(p * n) items get a deranged m_ref.

    The selected items' references are rotated along a shuffled order, so no
    selected item keeps its own reference (a lone selected item cannot be
    deranged and is left as is). Instructions and m0 are untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = random.Random(seed)
    out = list(tasks)
    by_kind: dict[str, list[int]] = {}
    for i, t in enumerate(tasks):
        by_kind.setdefault(t.kind.name, []).append(i)
    for name in sorted(by_kind):
        idxs = by_kind[name]
        k = int(np.floor(p * len(idxs) + 1e-9))
        if k < 2:
            continue
        chosen = rng.sample(idxs, k)
        for pos, i in enumerate(chosen):
            donor = tasks[chosen[(pos + 1) % k]]
            out[i] = tasks[i].replace(m_ref=donor.m_ref, extra={**tasks[i].extra, "corrupted": True})
    return out


def drop_guidance(tasks: list[TaskSpec], keep_fraction: float, seed: int = 0) -> list[TaskSpec]:
    """Keep reference guidance on a ``keep_fraction`` subset of tasks (floor rule)."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in [0, 1]")
    rng = random.Random(seed)
    keep = set(rng.sample(range(len(tasks)), int(np.floor(keep_fraction * len(tasks) + 1e-9))))
    return [t.replace(guidance_enabled=(i in keep) and t.guidance_enabled)
            for i, t in enumerate(tasks)]


# ------------------------------------------------------------------ evaluation

@dataclass(eq=False)
class EvalResult:
    """Sampled responses (tasks x k) with aggregate, per-kind and best-of-k reports."""
    tasks: list[TaskSpec]
    responses: list[list]          # ParsedResponse per task per sample
    report: object                 # MetricsReport over the first sample of each task
    per_kind: dict
    best_of: dict                  # k -> MetricsReport

    def rows(self) -> list[dict]:
        from .reward import evaluation_rows
        out = []
        for s in range(len(self.responses[0]) if self.responses else 0):
            for r in evaluation_rows([(t, rs[s]) for t, rs in zip(self.tasks, self.responses)]):
                out.append({**r, "sample": s})
        return out


def _eval_rng(seed: int, task_index: int, sample: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(task_index), int(sample), 99]))


def evaluate(params, tasks: list[TaskSpec], k: int = 1, decode=None, seed: int = 0,
             ks=None, batch_size: int = 64) -> EvalResult:
    """Sample ``k`` responses per task and score them.

    ``report`` uses the first sample of every task; ``best_of`` holds
    best-of-j reports for every j in ``ks`` (default: powers of two up to k)
    computed on prefixes of the same sample matrix.
    """
    from .policy import DecodeConfig, default_vocab, encode_prompt, parse_completion, sample_batch
    if k < 1:
        raise ValueError("k must be >= 1")
    if not tasks:
        raise ValueError("no tasks to evaluate")
    decode = decode or DecodeConfig()
    v = default_vocab()
    prompts = [encode_prompt(t, v) for t in tasks]
    rows = [(j, s) for j in range(len(tasks)) for s in range(k)]
    comps = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        outs = sample_batch(params, [prompts[j] for j, _ in chunk],
                            None if decode.greedy else [_eval_rng(seed, j, s) for j, s in chunk],
                            decode.temperature, decode.top_p, decode.max_len, decode.greedy,
                            eos=v.id("EOS"))
        comps.extend(o.tokens for o in outs)
    responses = [[parse_completion(comps[j * k + s], v) for s in range(k)] for j in range(len(tasks))]
    first = [(t, rs[0]) for t, rs in zip(tasks, responses)]
    report = metrics(first)
    per_kind = {}
    for name in sorted({t.kind.name for t in tasks}):
        per_kind[name] = metrics([(t, r) for t, r in first if t.kind.name == name])
    if ks is None:
        ks = [j for j in (1, 2, 4, 8, 16, 32, 64) if j <= k]
    best = {j: best_of_k([(t, rs[:j]) for t, rs in zip(tasks, responses)]) for j in ks}
    return EvalResult(list(tasks), responses, report, per_kind, best)
