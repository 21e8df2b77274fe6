"""SFT, GRPO and reference-guided (RePO) updates for the token policy."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .policy import (PolicyParams, Vocab, answer_tokens, batch_logprob_grad, batch_logprobs,
                     default_vocab, encode_prompt, parse_completion, reasoning_prefix,
                     response_rng, sample_batch, snapshot)
from .reward import ParsedResponse, total_reward
from .tasks import TaskSpec

_RANDOM_RE = re.compile(r"^random\(?\s*([0-9.eE+-]+)\s*\)?$")


class NonFiniteLoss(FloatingPointError):
    pass


def parse_mask_mode(mode: str) -> tuple[str, float]:
    """'answer_only', 'no_mask' or 'random(p)' (also 'random:p') -> (kind, p)."""
    m = mode.strip().lower()
    if m in ("answer_only", "no_mask"):
        return m, 0.0
    hit = _RANDOM_RE.match(m.replace(":", "(", 1) if m.startswith("random:") else m)
    if hit:
        p = float(hit.group(1))
        if not 0.0 <= p <= 1.0:
            raise ValueError("random mask probability must lie in [0, 1]")
        return "random", p
    raise ValueError(f"unknown mask mode {mode!r}")


@dataclass
class TrainConfig:
    G: int = 4
    eps: float = 0.2
    beta: float = 1.0
    gamma: float = 0.04
    lr: float = 1e-2
    steps: int = 300
    temperature: float = 0.75
    top_p: float = 0.85
    max_len: int = 160
    seed: int = 0
    reward_mode: str = "binary"
    mask_mode: str = "answer_only"
    guidance_keep_fraction: float = 1.0
    length_normalize_guidance: bool = False
    batch_size: int = 4
    momentum: float = 0.9
    inner_epochs: int = 1
    sft_steps: int = 100
    sft_lr: float | None = None

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.steps < 0 or self.sft_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.temperature <= 0 or not 0.0 < self.top_p <= 1.0:
            raise ValueError("need temperature > 0 and 0 < top_p <= 1")
        if self.max_len < 1 or self.batch_size < 1 or self.inner_epochs < 1:
            raise ValueError("max_len, batch_size and inner_epochs must be >= 1")
        if self.reward_mode not in ("binary", "continuous"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if not 0.0 <= self.guidance_keep_fraction <= 1.0:
            raise ValueError("guidance_keep_fraction must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        parse_mask_mode(self.mask_mode)

    @property
    def mask(self) -> tuple[str, float]:
        return parse_mask_mode(self.mask_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ scalar pieces

def advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group-relative advantages (r - mean) / population std; zeros when std < 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards")
    std = r.std()
    if std < 1e-8:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def k3(logp_theta, logp_ref):
    """x - ln x - 1 with x = pi_ref / pi_theta, evaluated from log-probabilities."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_theta, dtype=np.float64)
    out = np.expm1(d) - d
    return float(out) if out.ndim == 0 else out


def clipped_term(ratio, A, eps: float):
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    out = np.minimum(ratio * A, np.clip(ratio, 1.0 - eps, 1.0 + eps) * A)
    return float(out) if out.ndim == 0 else out


def _clip_active(ratio: np.ndarray, A: float, eps: float) -> np.ndarray:
    """Tokens where the clipped branch is selected and strictly constant."""
    return ((A > 0) & (ratio > 1.0 + eps)) | ((A < 0) & (ratio < 1.0 - eps))


# ------------------------------------------------------------------ groups

@dataclass(eq=False)
class GroupSample:
    task: TaskSpec
    prompt: list[int]
    completions: list[tuple[int, ...]]
    parsed: list[ParsedResponse]
    rewards: np.ndarray
    old_logprobs: list[np.ndarray]
    ref_logprobs: list[np.ndarray]
    advantages: np.ndarray = field(default=None)
    r_prop: np.ndarray = field(default=None)

    def __post_init__(self):
        G = len(self.completions)
        if not (len(self.parsed) == len(self.rewards) == len(self.old_logprobs)
                == len(self.ref_logprobs) == G):
            raise ValueError("group lists must all have length G")
        if self.advantages is None:
            self.advantages = advantages(self.rewards)


def sample_groups(params: PolicyParams, ref: PolicyParams, tasks: Sequence[TaskSpec],
                  cfg: TrainConfig, step: int, vocab: Vocab | None = None) -> list[GroupSample]:
    """Draw G responses per task from the current policy and score them."""
    v = vocab or default_vocab()
    G = cfg.G
    prompts = [encode_prompt(t, v) for t in tasks]
    rows = [prompts[j] for j in range(len(tasks)) for _ in range(G)]
    rngs = [response_rng(cfg.seed, step, n) for n in range(len(rows))]
    outs = sample_batch(params, rows, rngs, cfg.temperature, cfg.top_p, cfg.max_len,
                        eos=v.id("EOS"))
    comps = [o.tokens for o in outs]
    ref_lp = batch_logprobs(ref, rows, comps)
    groups = []
    for j, task in enumerate(tasks):
        sl = slice(j * G, (j + 1) * G)
        parsed = [parse_completion(c, v) for c in comps[sl]]
        rbs = [total_reward(p, task, cfg.reward_mode) for p in parsed]
        groups.append(GroupSample(
            task=task, prompt=prompts[j], completions=comps[sl], parsed=parsed,
            rewards=np.array([rb.total for rb in rbs]),
            old_logprobs=[np.array(o.logprobs) for o in outs[sl]],
            ref_logprobs=ref_lp[sl],
            r_prop=np.array([rb.r_prop if rb.valid else 0.0 for rb in rbs])))
    return groups


# ------------------------------------------------------------------ objectives

@dataclass
class _GrpoStats:
    value: float
    clip_fraction: float
    kl_mean: float


def _grpo_weights(groups: Sequence[GroupSample], cur_lp: Sequence[np.ndarray], cfg: TrainConfig):
    """Per-token weights on log pi_theta plus the objective value (summed over groups)."""
    weights, value, n_clip, n_tok, kl_sum = [], 0.0, 0, 0, 0.0
    pos = 0
    for g in groups:
        G = len(g.completions)
        gval = 0.0
        for i in range(G):
            lp = cur_lp[pos]
            pos += 1
            L = len(lp)
            if L == 0:
                weights.append(np.zeros(0))
                continue
            A = float(g.advantages[i])
            ratio = np.exp(lp - g.old_logprobs[i])
            kl = k3(lp, g.ref_logprobs[i])
            gval += float(np.mean(clipped_term(ratio, A, cfg.eps) - cfg.gamma * kl))
            clipped = _clip_active(ratio, A, cfg.eps)
            g_clip = np.where(clipped, 0.0, ratio * A)
            x = np.exp(g.ref_logprobs[i] - lp)
            weights.append((g_clip - cfg.gamma * (1.0 - x)) / (G * L))
            n_clip += int(clipped.sum())
            n_tok += L
            kl_sum += float(np.sum(kl))
        value += gval / G
    return weights, value, _GrpoStats(value, n_clip / max(n_tok, 1), kl_sum / max(n_tok, 1))


def _rows(groups: Sequence[GroupSample]):
    prompts = [g.prompt for g in groups for _ in g.completions]
    comps = [c for g in groups for c in g.completions]
    return prompts, comps


def grpo_objective(params: PolicyParams, old: PolicyParams | None, ref: PolicyParams | None,
                   groups: GroupSample | Sequence[GroupSample], cfg: TrainConfig,
                   with_stats: bool = False):
    """Clipped surrogate minus gamma * K3, token-mean per response, mean over the group.

    Multiple groups are summed. ``old`` and ``ref`` are unused beyond the
    log-probabilities stored in each group (they are recorded at sampling).
    """
    groups = [groups] if isinstance(groups, GroupSample) else list(groups)
    prompts, comps = _rows(groups)
    cur = batch_logprobs(params, prompts, comps)
    weights, value, stats = _grpo_weights(groups, cur, cfg)
    _, grad = batch_logprob_grad(params, prompts, comps, weights)
    return (value, grad, stats) if with_stats else (value, grad)


def guidance_sequence(task: TaskSpec, reasoning: Sequence[int], mask_mode: str,
                      rng: np.random.Generator | None, length_normalize: bool = False,
                      vocab: Vocab | None = None) -> tuple[list[int], list[int], np.ndarray]:
    """(prompt, reasoning + reference answer, per-token weights)."""
    v = vocab or default_vocab()
    kind, p = parse_mask_mode(mask_mode)
    target = answer_tokens(task.m_ref, v)
    t = list(reasoning)
    tw = np.full(len(target), 1.0 / len(target) if length_normalize else 1.0)
    if kind == "answer_only":
        rw = np.zeros(len(t))
    elif kind == "no_mask":
        rw = np.ones(len(t))
    else:
        if rng is None:
            raise ValueError("random masking needs an rng")
        rw = (rng.random(len(t)) < p).astype(np.float64)
    return encode_prompt(task, v), t + target, np.concatenate([rw, tw])


def guidance_objective(params: PolicyParams, task: TaskSpec, reasoning: Sequence[int],
                       m_ref=None, mask_mode: str = "answer_only",
                       rng: np.random.Generator | None = None,
                       length_normalize: bool = False) -> tuple[float, np.ndarray]:
    """Reference log-likelihood of the answer given the prompt and a reasoning prefix."""
    if m_ref is not None and m_ref is not task.m_ref:
        task = task.replace(m_ref=m_ref)
    q, seq, w = guidance_sequence(task, reasoning, mask_mode, rng, length_normalize)
    return batch_logprob_grad(params, [q], [seq], [w])


def _guidance_rng(seed: int, step: int, j: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), int(j), int(i), 7]))


def _guidance_batch(params: PolicyParams, groups: Sequence[GroupSample], cfg: TrainConfig,
                    step: int, vocab: Vocab) -> tuple[float, np.ndarray, int]:
    """beta-free guidance sum: sum_j (1/G) sum_i guidance(t_ij); skips disabled tasks."""
    prompts, seqs, weights = [], [], []
    for j, g in enumerate(groups):
        if not g.task.guidance_enabled:
            continue
        G = len(g.completions)
        for i, comp in enumerate(g.completions):
            t = reasoning_prefix(comp, vocab)
            q, s, w = guidance_sequence(g.task, t, cfg.mask_mode, _guidance_rng(cfg.seed, step, j, i),
                                        cfg.length_normalize_guidance, vocab)
            prompts.append(q)
            seqs.append(s)
            weights.append(w / G)
    if not prompts:
        return 0.0, np.zeros(params.dims.count), 0
    value, grad = batch_logprob_grad(params, prompts, seqs, weights)
    return value, grad, len(prompts)


def repo_objective(params: PolicyParams, groups: Sequence[GroupSample], cfg: TrainConfig,
                   step: int = 0, vocab: Vocab | None = None, with_stats: bool = False):
    """(1/B) sum_j [GRPO_j + beta * (1/G) sum_i guidance_ij]; beta = 0 skips guidance."""
    v = vocab or default_vocab()
    B = len(groups)
    value, grad, stats = grpo_objective(params, None, None, groups, cfg, with_stats=True)
    gval = 0.0
    if cfg.beta != 0.0:
        gval, ggrad, _ = _guidance_batch(params, groups, cfg, step, v)
        value = value + cfg.beta * gval
        grad = grad + cfg.beta * ggrad
    value, grad = value / B, grad / B
    if with_stats:
        return value, grad, stats, gval / B
    return value, grad


# ------------------------------------------------------------------ steps

@dataclass
class StepLog:
    step: int
    phase: str
    mean_reward: float
    max_reward: float
    sr_in_group: float
    validity: float
    mean_length: float
    objective: float
    grad_norm: float
    clip_fraction: float
    kl_mean: float
    guidance_loss: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class OptState:
    params: PolicyParams
    velocity: np.ndarray

    @classmethod
    def start(cls, params: PolicyParams) -> "OptState":
        return cls(params, np.zeros_like(params.flat))


def _ascend(state: OptState, grad: np.ndarray, lr: float, momentum: float) -> OptState:
    vel = momentum * state.velocity + grad
    return OptState(PolicyParams(state.params.dims, state.params.flat + lr * vel), vel)


def _check_finite(value: float, grad: np.ndarray, step: int) -> None:
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteLoss(f"non-finite objective or gradient at step {step}")


def repo_step(state: OptState | PolicyParams, tasks: Sequence[TaskSpec], cfg: TrainConfig,
              ref: PolicyParams, step: int = 0, vocab: Vocab | None = None,
              phase: str = "rl") -> tuple[OptState, StepLog]:
    """One sampling round and ``cfg.inner_epochs`` momentum-ascent updates.

    With ``cfg.beta == 0`` this is exactly the GRPO step: the guidance path
    is skipped entirely and its masking RNG streams are never touched.
    """
    v = vocab or default_vocab()
    if isinstance(state, PolicyParams):
        state = OptState.start(state)
    groups = sample_groups(state.params, ref, tasks, cfg, step, v)
    value, grad, stats, gval = 0.0, None, None, 0.0
    for _ in range(cfg.inner_epochs):
        value, grad, stats, gval = repo_objective(state.params, groups, cfg, step, v,
                                                  with_stats=True)
        _check_finite(value, grad, step)
        state = _ascend(state, grad, cfg.lr, cfg.momentum)
    rewards = np.concatenate([g.rewards for g in groups])
    rprop = np.concatenate([g.r_prop for g in groups])
    valid = [p.valid for g in groups for p in g.parsed]
    lengths = [len(c) for g in groups for c in g.completions]
    log = StepLog(step=step, phase=phase, mean_reward=float(rewards.mean()),
                  max_reward=float(rewards.max()), sr_in_group=float((rprop == 1.0).mean()),
                  validity=float(np.mean(valid)), mean_length=float(np.mean(lengths)),
                  objective=float(value), grad_norm=float(np.linalg.norm(grad)),
                  clip_fraction=stats.clip_fraction, kl_mean=stats.kl_mean,
                  guidance_loss=float(-gval))
    return state, log


def sft_objective(params: PolicyParams, tasks: Sequence[TaskSpec],
                  vocab: Vocab | None = None) -> tuple[float, np.ndarray]:
    """Mean over tasks of the token-mean log-likelihood of the bare reference answer."""
    v = vocab or default_vocab()
    prompts = [encode_prompt(t, v) for t in tasks]
    seqs = [answer_tokens(t.m_ref, v) for t in tasks]
    weights = [np.full(len(s), 1.0 / (len(s) * len(tasks))) for s in seqs]
    return batch_logprob_grad(params, prompts, seqs, weights)


def sft_step(state: OptState | PolicyParams, tasks: Sequence[TaskSpec], lr: float,
             momentum: float = 0.9, step: int = 0,
             vocab: Vocab | None = None) -> tuple[OptState, StepLog]:
    """Cross-entropy ascent on [ANS_OPEN, m_ref, ANS_CLOSE, EOS] right after the prompt."""
    if isinstance(state, PolicyParams):
        state = OptState.start(state)
    value, grad = sft_objective(state.params, tasks, vocab)
    _check_finite(value, grad, step)
    new = _ascend(state, grad, lr, momentum)
    log = StepLog(step=step, phase="sft", mean_reward=0.0, max_reward=0.0, sr_in_group=0.0,
                  validity=0.0, mean_length=float(np.mean([len(answer_tokens(t.m_ref, vocab))
                                                           for t in tasks])),
                  objective=float(value), grad_norm=float(np.linalg.norm(grad)),
                  clip_fraction=0.0, kl_mean=0.0, guidance_loss=0.0)
    return new, log


# ------------------------------------------------------------------ training loops

VARIANTS = ("sft", "grpo", "grpo-sft-init", "repo")


def batch_indices(n: int, batch_size: int, seed: int, step: int, phase: int = 0) -> list[int]:
    """Tasks for one step, drawn without replacement from a per-step stream."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 11, int(phase)]))
    k = min(batch_size, n)
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def apply_guidance_keep(tasks: Sequence[TaskSpec], fraction: float, seed: int) -> list[TaskSpec]:
    """Keep reference guidance on floor(fraction * n) tasks chosen by ``seed``."""
    if fraction >= 1.0:
        return list(tasks)
    from .bench import drop_guidance
    return drop_guidance(list(tasks), fraction, seed)


def train(variant: str, tasks: Sequence[TaskSpec], cfg: TrainConfig, params: PolicyParams,
          on_step: Callable[[int, PolicyParams, StepLog], None] | None = None,
          vocab: Vocab | None = None) -> tuple[PolicyParams, list[StepLog]]:
    """Run one training variant starting from ``params``.

    sft: ``cfg.steps`` supervised steps. grpo: RePO steps with beta forced to
    0. grpo-sft-init: ``cfg.sft_steps`` supervised steps, then grpo.
    repo: RePO steps with ``cfg.beta``. The reference policy is frozen at the
    start of each reinforcement phase.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    tasks = list(tasks)
    if not tasks:
        raise ValueError("empty training set")
    v = vocab or default_vocab()
    logs: list[StepLog] = []
    state = OptState.start(params.copy())
    sft_lr = cfg.sft_lr if cfg.sft_lr is not None else cfg.lr

    def sft_phase(n_steps: int) -> None:
        nonlocal state
        for s in range(n_steps):
            batch = [tasks[i] for i in batch_indices(len(tasks), cfg.batch_size, cfg.seed, s, 1)]
            state, log = sft_step(state, batch, sft_lr, cfg.momentum, s, v)
            logs.append(log)
            if on_step:
                on_step(s, state.params, log)

    def rl_phase(rl_cfg: TrainConfig, offset: int) -> None:
        nonlocal state
        ref = snapshot(state.params)
        state = OptState.start(state.params)
        pool = apply_guidance_keep(tasks, rl_cfg.guidance_keep_fraction, rl_cfg.seed)
        for s in range(rl_cfg.steps):
            batch = [pool[i] for i in batch_indices(len(pool), rl_cfg.batch_size, rl_cfg.seed, s)]
            state, log = repo_step(state, batch, rl_cfg, ref, s, v)
            log.step = offset + s
            logs.append(log)
            if on_step:
                on_step(offset + s, state.params, log)

    if variant == "sft":
        sft_phase(cfg.steps)
    elif variant == "grpo":
        rl_phase(_replace(cfg, beta=0.0), 0)
    elif variant == "grpo-sft-init":
        sft_phase(cfg.sft_steps)
        rl_phase(_replace(cfg, beta=0.0), cfg.sft_steps)
    else:
        rl_phase(cfg, 0)
    return state.params, logs


def _replace(cfg: TrainConfig, **changes) -> TrainConfig:
    return TrainConfig(**{**cfg.to_dict(), **changes})


# ------------------------------------------------------------------ base model

def format_demonstration(task: TaskSpec, rng: np.random.Generator, pool: Sequence,
                         vocab: Vocab | None = None) -> list[int]:
    """A reasoning-then-answer completion used to give the base policy its format.

    Reasoning: 3-12 tokens drawn from m0's SMILES tokens. Answer: m0 itself
    (25%), m0 with one or two random token edits (50%, validity not
    enforced) or a random pool molecule (25%). No task reference is used.
    """
    v = vocab or default_vocab()
    m0 = v.encode_smiles(task.m0_smiles)
    think = [int(t) for t in rng.choice(m0, size=int(rng.integers(3, 13)))]
    u = rng.random()
    if u < 0.25:
        ans = list(m0)
    elif u < 0.75:
        ans = list(m0)
        alphabet = [v.id(c) for c in ("C", "N", "O", "c", "n", "F", "Cl", "(", ")", "=", "1")]
        for _ in range(int(rng.integers(1, 3))):
            op = rng.integers(3)
            k = int(rng.integers(len(ans) + (1 if op == 0 else 0)))
            if op == 0:
                ans.insert(k, alphabet[int(rng.integers(len(alphabet)))])
            elif op == 1 and len(ans) > 1:
                del ans[k]
            else:
                ans[min(k, len(ans) - 1)] = alphabet[int(rng.integers(len(alphabet)))]
    else:
        other = pool[int(rng.integers(len(pool)))]
        ans = v.encode_smiles(other.canonical_smiles)
    return ([v.id("THINK_OPEN")] + think + [v.id("THINK_CLOSE"), v.id("ANS_OPEN")] + ans
            + [v.id("ANS_CLOSE"), v.id("EOS")])


def pretrain_base(tasks: Sequence[TaskSpec], params: PolicyParams, steps: int = 1000,
                  batch_size: int = 16, lr: float = 0.1, momentum: float = 0.9, seed: int = 0,
                  pool=None, vocab: Vocab | None = None,
                  on_step: Callable[[int, float], None] | None = None) -> PolicyParams:
    """Teacher-force synthetic format demonstrations (token-mean likelihood)."""
    v = vocab or default_vocab()
    if pool is None:
        from .bench import seed_molecules
        pool = seed_molecules()
    tasks = list(tasks)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    state = OptState.start(params.copy())
    for s in range(steps):
        idx = rng.choice(len(tasks), size=min(batch_size, len(tasks)), replace=False)
        batch = [tasks[int(i)] for i in idx]
        prompts = [encode_prompt(t, v) for t in batch]
        seqs = [format_demonstration(t, rng, pool, v) for t in batch]
        weights = [np.full(len(q), 1.0 / (len(q) * len(batch))) for q in seqs]
        value, grad = batch_logprob_grad(state.params, prompts, seqs, weights)
        _check_finite(value, grad, s)
        state = _ascend(state, grad, lr, momentum)
        if on_step:
            on_step(s, value)
    return state.params
