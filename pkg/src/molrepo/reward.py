"""Response parsing, verifiable rewards and evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass

from .fp import similarity
from .mol import Molecule, SmilesError, parse_smiles
from .patterns import count_group
from .props import property_value
from .tasks import DOWN, TaskKind, TaskSpec

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANS_OPEN, ANS_CLOSE = "<answer>", "</answer>"

_ANSWER_RE = re.compile(re.escape(ANS_OPEN) + r"(.*?)" + re.escape(ANS_CLOSE), re.S)


class NotApplicable(ValueError):
    """Continuous property reward requested for a structure-editing task."""


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ParsedResponse:
    text: str
    reasoning_span: tuple[int, int]
    answer_span: tuple[int, int] | None
    answer_text: str | None
    molecule: Molecule | None
    valid: bool
    tokens: tuple = ()

    @property
    def reasoning(self) -> str:
        return self.text[self.reasoning_span[0]:self.reasoning_span[1]]

    @property
    def length(self) -> int:
        return len(self.tokens) if self.tokens else len(self.text)


def extract_answer(text: str, tokens=()) -> ParsedResponse:
    """Take the first well-formed answer span; everything before it is reasoning.

    Missing tags, an empty answer or an unparsable SMILES all yield
    ``valid=False`` rather than raising.
    """
    m = _ANSWER_RE.search(text)
    if m is None:
        return ParsedResponse(text, (0, len(text)), None, None, None, False, tuple(tokens))
    answer = m.group(1).strip()
    mol = None
    if answer:
        try:
            mol = parse_smiles(answer)
        except SmilesError:
            mol = None
    return ParsedResponse(text, (0, m.start()), (m.start(1), m.end(1)), answer, mol,
                          mol is not None, tuple(tokens))


def r_struct(m: Molecule, m0: Molecule) -> float:
    """Tanimoto similarity of radius-2, 2048-bit circular fingerprints."""
    return similarity(m, m0)


def _objective_holds(pid, direction: str, m: Molecule, m0: Molecule) -> bool:
    f, f0 = property_value(pid, m), property_value(pid, m0)
    return f <= f0 if direction == DOWN else f >= f0


def structure_success(kind: TaskKind, m: Molecule, m0: Molecule) -> bool:
    if kind.family == "add":
        g = kind.groups[0]
        return count_group(m, g) > count_group(m0, g)
    if kind.family == "del":
        g = kind.groups[0]
        return count_group(m, g) < count_group(m0, g)
    old, new = kind.groups
    return (count_group(m, old) < count_group(m0, old)
            and count_group(m, new) > count_group(m0, new))


def r_prop_binary(task: TaskSpec | TaskKind, m: Molecule, m0: Molecule | None = None) -> int:
    """1 when the edit satisfies the task predicate (non-strict for properties)."""
    kind = task.kind if isinstance(task, TaskSpec) else task
    if m0 is None:
        m0 = task.m0
    if kind.is_property:
        return int(all(_objective_holds(p, d, m, m0) for p, d in kind.objectives))
    return int(structure_success(kind, m, m0))


def r_prop_continuous(task: TaskSpec | TaskKind, m: Molecule, m0: Molecule | None = None) -> float:
    """Directed property change; summed over objectives for multi-property tasks."""
    kind = task.kind if isinstance(task, TaskSpec) else task
    if m0 is None:
        m0 = task.m0
    if not kind.is_property:
        raise NotApplicable(f"continuous reward undefined for {kind.name}")
    total = 0.0
    for pid, d in kind.objectives:
        diff = property_value(pid, m) - property_value(pid, m0)
        total += -diff if d == DOWN else diff
    return total


@dataclass(frozen=True)
class RewardBreakdown:
    r_struct: float
    r_prop: float
    total: float
    valid: bool


ZERO_REWARD = RewardBreakdown(0.0, 0.0, 0.0, False)


def total_reward(resp: ParsedResponse, task: TaskSpec, mode: str = "binary") -> RewardBreakdown:
    if not resp.valid:
        return ZERO_REWARD
    m = resp.molecule
    rs = r_struct(m, task.m0)
    if mode == "binary":
        rp = float(r_prop_binary(task, m))
    elif mode == "continuous":
        rp = r_prop_continuous(task, m) if task.kind.is_property else float(r_prop_binary(task, m))
    else:
        raise ValueError(f"unknown reward mode {mode!r}")
    return RewardBreakdown(rs, rp, rp + rs, True)


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class MetricsReport:
    n: int
    sr: float
    sim: float
    product: float
    validity: float
    mean_length: float
    unique_valid_per_query: float
    k: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScoredResponse:
    task: TaskSpec
    response: ParsedResponse
    success: bool
    reward: RewardBreakdown


def score(task: TaskSpec, resp: ParsedResponse, strict: bool = False) -> ScoredResponse:
    """Success flag plus binary reward breakdown for one response.

    ``strict=True`` requires a strict property change for success, which is
    an optional diagnostic; the default follows the non-strict reward.
    """
    rb = total_reward(resp, task, "binary")
    ok = rb.valid and rb.r_prop == 1.0
    if ok and strict and task.kind.is_property:
        ok = all(property_value(p, resp.molecule) != property_value(p, task.m0)
                 for p, _ in task.kind.objectives)
    return ScoredResponse(task, resp, ok, rb)


def _report(per_task: list[list[ScoredResponse]], valid_only: bool, k: int) -> MetricsReport:
    n = len(per_task)
    successes, sims, valid_sims = 0, [], []
    n_valid = n_resp = length = 0
    unique = []
    for group in per_task:
        if any(s.success for s in group):
            successes += 1
        best = max(group, key=lambda s: s.reward.total)
        sims.append(best.reward.r_struct)
        if best.reward.valid:
            valid_sims.append(best.reward.r_struct)
        n_resp += len(group)
        n_valid += sum(s.reward.valid for s in group)
        length += sum(s.response.length for s in group)
        unique.append(len({s.response.molecule.canonical_smiles for s in group
                           if s.response.valid}))
    sr = successes / n
    if valid_only:
        sim = sum(valid_sims) / len(valid_sims) if valid_sims else 0.0
    else:
        sim = sum(sims) / n
    return MetricsReport(n=n, sr=sr, sim=sim, product=sr * sim, validity=n_valid / n_resp,
                         mean_length=length / n_resp, unique_valid_per_query=sum(unique) / n, k=k)


def metrics(results, valid_only: bool = False, strict: bool = False) -> MetricsReport:
    """SR, Sim and SR x Sim over (task, ParsedResponse) pairs.

    Invalid responses count as failures with similarity 0 unless
    ``valid_only`` restricts the Sim average to valid responses.
    Responses sharing a task id are pooled for the unique-answer count only.
    """
    results = list(results)
    if not results:
        raise EmptyInput("no results to score")
    scored = [score(t, r, strict) for t, r in results]
    rep = _report([[s] for s in scored], valid_only, 1)
    uniq: dict[str, set] = {}
    for s in scored:
        bucket = uniq.setdefault(s.task.id, set())
        if s.response.valid:
            bucket.add(s.response.molecule.canonical_smiles)
    return MetricsReport(**{**rep.to_dict(),
                            "unique_valid_per_query": sum(map(len, uniq.values())) / len(uniq)})


def best_of_k(samples, valid_only: bool = False, strict: bool = False) -> MetricsReport:
    """``samples``: list of (task, [k ParsedResponse]).

    A task succeeds if any sample succeeds; Sim uses the sample with the
    highest total reward (earliest on ties).
    """
    samples = list(samples)
    if not samples:
        raise EmptyInput("no results to score")
    ks = {len(rs) for _, rs in samples}
    if min(ks) < 1:
        raise ValueError("k must be >= 1")
    per_task = [[score(t, r, strict) for r in rs] for t, rs in samples]
    return _report(per_task, valid_only, max(ks))


EVAL_COLUMNS = ("task_id", "kind", "valid", "r_struct", "r_prop", "total", "length")


def evaluation_rows(results, mode: str = "binary") -> list[dict]:
    rows = []
    for task, resp in results:
        rb = total_reward(resp, task, mode)
        rows.append({"task_id": task.id, "kind": task.kind.name, "valid": int(rb.valid),
                     "r_struct": rb.r_struct, "r_prop": rb.r_prop, "total": rb.total,
                     "length": resp.length})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVAL_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r[c] for c in EVAL_COLUMNS})
    return buf.getvalue()


def summary_json(report: MetricsReport) -> str:
    return json.dumps({"SR": report.sr, "Sim": report.sim, "product": report.product,
                       **report.to_dict()}, indent=2, sort_keys=True)
