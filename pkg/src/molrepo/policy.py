"""A small gated-recurrent token policy with exact log-probabilities and gradients.

Everything is plain numpy in float64. Parameters live in one flat vector so
optimizers, finite-difference checks and checkpoints treat them uniformly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .mol import Molecule, write_canonical
from .patterns import group_library
from .props import PropertyId
from .reward import ParsedResponse, extract_answer
from .tasks import DOWN, TaskSpec

CHECKPOINT_VERSION = 1

SPECIALS = ("PAD", "BOS", "EOS", "SEP", "THINK_OPEN", "THINK_CLOSE", "ANS_OPEN", "ANS_CLOSE",
            "UP", "DOWN")
FAMILY_TOKENS = ("T_ADD", "T_DEL", "T_SUB", "T_MULTI")
SMILES_TOKENS = ("Cl", "Br", "B", "C", "N", "O", "S", "P", "F", "I", "H",
                 "b", "c", "n", "o", "s", "p",
                 "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
                 "(", ")", "[", "]", "=", "#", "-", "+", "/", "\\", "@", "%")
_TEXT = {"THINK_OPEN": "<think>", "THINK_CLOSE": "</think>", "ANS_OPEN": "<answer>",
         "ANS_CLOSE": "</answer>", "EOS": ""}


class UnencodableCharacter(ValueError):
    pass


def _prop_token(pid: PropertyId) -> str:
    return "T_PROP_" + pid.value.upper()


def _group_token(name: str) -> str:
    return "G_" + name.upper()


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def index(self) -> dict[str, int]:
        return _index(self.tokens)

    def id(self, token: str) -> int:
        return self.index[token]

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def encode_smiles(self, smiles: str) -> list[int]:
        """Greedy tokenization; Cl and Br are single tokens."""
        idx, out, i = self.index, [], 0
        while i < len(smiles):
            two = smiles[i:i + 2]
            if two in ("Cl", "Br"):
                out.append(idx[two])
                i += 2
                continue
            ch = smiles[i]
            if ch not in idx or ch in SPECIALS:
                raise UnencodableCharacter(f"cannot encode {ch!r} in {smiles!r}")
            out.append(idx[ch])
            i += 1
        return out

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def decode_text(self, ids: Sequence[int]) -> str:
        """Render a completion as text: tags for specials, raw characters for SMILES."""
        parts = []
        for i in ids:
            t = self.tokens[i]
            if t in _TEXT:
                parts.append(_TEXT[t])
            elif t in _SMILES_SET:
                parts.append(t)
            else:
                parts.append(f"<|{t}|>")
        return "".join(parts)


_SMILES_SET = frozenset(SMILES_TOKENS)


@lru_cache(maxsize=8)
def _index(tokens: tuple[str, ...]) -> dict[str, int]:
    return {t: i for i, t in enumerate(tokens)}


@lru_cache(maxsize=1)
def default_vocab() -> Vocab:
    props = tuple(_prop_token(p) for p in PropertyId)
    groups = tuple(_group_token(g) for g in group_library())
    return Vocab(SPECIALS + FAMILY_TOKENS + props + groups + SMILES_TOKENS)


def encode_prompt(task: TaskSpec, vocab: Vocab | None = None) -> list[int]:
    """[BOS, task tokens, SEP, chars(canonical m0), SEP]."""
    v = vocab or default_vocab()
    k = task.kind
    head: list[str] = ["BOS"]
    if k.family in ("prop_up", "prop_down"):
        pid, d = k.objectives[0]
        head += [_prop_token(pid), "DOWN" if d == DOWN else "UP"]
    elif k.family == "multi":
        head.append("T_MULTI")
        for pid, d in k.objectives:
            head += [_prop_token(pid), "DOWN" if d == DOWN else "UP"]
    else:
        head.append({"add": "T_ADD", "del": "T_DEL", "sub": "T_SUB"}[k.family])
        head += [_group_token(g) for g in k.groups]
    head.append("SEP")
    return ([v.id(t) for t in head] + v.encode_smiles(write_canonical(task.m0))
            + [v.id("SEP")])


def answer_tokens(mol: Molecule | str, vocab: Vocab | None = None) -> list[int]:
    """[ANS_OPEN, chars(canonical m), ANS_CLOSE, EOS]."""
    v = vocab or default_vocab()
    smi = mol if isinstance(mol, str) else write_canonical(mol)
    return [v.id("ANS_OPEN")] + v.encode_smiles(smi) + [v.id("ANS_CLOSE"), v.id("EOS")]


def reasoning_prefix(completion: Sequence[int], vocab: Vocab | None = None) -> list[int]:
    """Completion tokens before the first ANS_OPEN (trailing EOS dropped)."""
    v = vocab or default_vocab()
    ans, eos = v.id("ANS_OPEN"), v.id("EOS")
    out = []
    for t in completion:
        if t == ans:
            break
        out.append(t)
    while out and out[-1] == eos:
        out.pop()
    return out


def parse_completion(completion: Sequence[int], vocab: Vocab | None = None) -> ParsedResponse:
    v = vocab or default_vocab()
    return extract_answer(v.decode_text(completion), tokens=tuple(completion))


def has_reasoning_span(completion: Sequence[int], vocab: Vocab | None = None) -> bool:
    """True when THINK_OPEN is later closed by THINK_CLOSE."""
    v = vocab or default_vocab()
    seq = list(completion)
    o = v.id("THINK_OPEN")
    if o not in seq:
        return False
    return v.id("THINK_CLOSE") in seq[seq.index(o) + 1:]


# ------------------------------------------------------------------ parameters

@dataclass(frozen=True)
class Dims:
    V: int
    E: int = 32
    H: int = 64

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, E, H = self.V, self.E, self.H
        return {"emb": (V, E), "Wx": (E, 3 * H), "Wh": (H, 3 * H), "b": (3 * H,),
                "Wo": (H, V), "bo": (V,)}

    @property
    def count(self) -> int:
        V, E, H = self.V, self.E, self.H
        return V * E + (E * 3 * H + H * 3 * H + 3 * H) + H * V + V

    def slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, shp in self.shapes.items():
            n = int(np.prod(shp))
            out[name] = slice(pos, pos + n)
            pos += n
        return out


class PolicyParams:
    """Flat float64 parameter vector with named views."""

    def __init__(self, dims: Dims, flat: np.ndarray | None = None):
        self.dims = dims
        if flat is None:
            flat = np.zeros(dims.count)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (dims.count,):
            raise ValueError(f"expected {dims.count} parameters, got {flat.shape}")
        self.flat = flat

    def view(self, name: str) -> np.ndarray:
        return self.flat[self.dims.slices()[name]].reshape(self.dims.shapes[name])

    @property
    def emb(self):
        return self.view("emb")

    @property
    def Wx(self):
        return self.view("Wx")

    @property
    def Wh(self):
        return self.view("Wh")

    @property
    def b(self):
        return self.view("b")

    @property
    def Wo(self):
        return self.view("Wo")

    @property
    def bo(self):
        return self.view("bo")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.dims, self.flat.copy())


def init_params(seed: int = 0, dims: Dims | None = None, scale: float = 0.08) -> PolicyParams:
    """Gaussian initialisation with standard deviation ``scale``."""
    dims = dims or Dims(default_vocab().size)
    rng = np.random.default_rng(seed)
    return PolicyParams(dims, rng.normal(0.0, scale, dims.count))


def snapshot(params: PolicyParams) -> PolicyParams:
    return params.copy()


def save_checkpoint(params: PolicyParams, path, vocab: Vocab | None = None) -> None:
    v = vocab or default_vocab()
    d = params.dims
    obj = {"version": CHECKPOINT_VERSION, "dims": {"V": d.V, "E": d.E, "H": d.H},
           "vocab_hash": v.hash, "params": [float(x) for x in params.flat]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


class VocabMismatch(ValueError):
    pass


def load_checkpoint(path, vocab: Vocab | None = None) -> PolicyParams:
    v = vocab or default_vocab()
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    if obj.get("vocab_hash") != v.hash:
        raise VocabMismatch("checkpoint vocabulary differs from this build")
    d = obj["dims"]
    return PolicyParams(Dims(int(d["V"]), int(d["E"]), int(d["H"])), np.array(obj["params"]))


# ------------------------------------------------------------------ forward / backward

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _cell(p: PolicyParams, x: np.ndarray, h: np.ndarray):
    H = p.dims.H
    gx = x @ p.Wx + p.b
    Wh = p.Wh
    gh = h @ Wh[:, :2 * H]
    z = _sigmoid(gx[:, :H] + gh[:, :H])
    r = _sigmoid(gx[:, H:2 * H] + gh[:, H:])
    rh = r * h
    n = np.tanh(gx[:, 2 * H:] + rh @ Wh[:, 2 * H:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (z, r, n, rh)


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    arr = np.zeros((len(seqs), T), dtype=np.int64)
    lens = np.array([len(s) for s in seqs])
    for i, s in enumerate(seqs):
        arr[i, :len(s)] = s
    return arr, lens


def _forward(p: PolicyParams, inputs: np.ndarray, keep_cache: bool):
    """Run the cell over (B, T) inputs; returns hidden states after each input."""
    B, T = inputs.shape
    h = np.zeros((B, p.dims.H))
    hs = np.empty((B, T, p.dims.H))
    cache = [] if keep_cache else None
    emb = p.emb
    for t in range(T):
        x = emb[inputs[:, t]]
        h_prev = h
        h, parts = _cell(p, x, h_prev)
        hs[:, t] = h
        if keep_cache:
            cache.append((x, h_prev) + parts)
    return hs, cache


def _batch(prompts, completions):
    """Teacher-forcing layout: inputs and the target predicted after each input."""
    seqs = [list(q) + list(o) for q, o in zip(prompts, completions)]
    full, lens = _pad(seqs)
    inputs = full[:, :-1]
    targets = full[:, 1:]
    B, T = inputs.shape
    mask_pos = np.zeros((B, T), dtype=bool)
    for i, (q, o) in enumerate(zip(prompts, completions)):
        if len(q) < 1:
            raise ValueError("prompt must contain at least one token")
        mask_pos[i, len(q) - 1:len(q) - 1 + len(o)] = True
    return inputs, targets, mask_pos


def batch_logprobs(params: PolicyParams, prompts, completions) -> list[np.ndarray]:
    """Per-token log pi(o_k | q, o_<k) for each (prompt, completion) pair."""
    if not prompts:
        return []
    inputs, targets, mask_pos = _batch(prompts, completions)
    if inputs.shape[1] == 0:
        return [np.zeros(0) for _ in prompts]
    hs, _ = _forward(params, inputs, keep_cache=False)
    logp = _log_softmax(hs @ params.Wo + params.bo)
    chosen = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return [chosen[i][mask_pos[i]] for i in range(len(prompts))]


def logprobs(params: PolicyParams, prompt, completion) -> np.ndarray:
    return batch_logprobs(params, [prompt], [completion])[0]


def next_token_distribution(params: PolicyParams, prefix: Sequence[int]) -> np.ndarray:
    """Full log-distribution over the vocabulary after consuming ``prefix``."""
    hs, _ = _forward(params, np.asarray([list(prefix)]), keep_cache=False)
    return _log_softmax(hs[0, -1] @ params.Wo + params.bo)


def batch_logprob_grad(params: PolicyParams, prompts, completions, weights) -> tuple[float, np.ndarray]:
    """value = sum_i sum_k w_ik log pi(o_ik | .), with its exact gradient (BPTT)."""
    dims = params.dims
    grad = PolicyParams(dims)
    if not prompts:
        return 0.0, grad.flat
    for o, w in zip(completions, weights):
        if len(o) != len(w):
            raise ValueError("weights must match completion length")
    inputs, targets, mask_pos = _batch(prompts, completions)
    B, T = inputs.shape
    if T == 0:
        return 0.0, grad.flat
    W = np.zeros((B, T))
    for i, w in enumerate(weights):
        W[i, mask_pos[i]] = np.asarray(w, dtype=np.float64)
    hs, cache = _forward(params, inputs, keep_cache=True)
    logp = _log_softmax(hs @ params.Wo + params.bo)
    chosen = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    value = float((W * chosen).sum())

    # d value / d logits = w (onehot - p)
    dlogits = -np.exp(logp) * W[..., None]
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) + W[..., None],
                      axis=-1)
    H = dims.H
    gWo, gbo = grad.Wo, grad.bo
    gWo += np.einsum("bth,btv->hv", hs, dlogits)
    gbo += dlogits.sum(axis=(0, 1))
    dh_out = dlogits @ params.Wo.T

    Wx, Wh = params.Wx, params.Wh
    gemb, gWx, gWh, gb = grad.emb, grad.Wx, grad.Wh, grad.b
    dh_next = np.zeros((B, H))
    dgates = np.empty((B, 3 * H))
    for t in range(T - 1, -1, -1):
        x, h_prev, z, r, n, rh = cache[t]
        dh = dh_out[:, t] + dh_next
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dn_pre = dn * (1.0 - n * n)
        dz_pre = dz * z * (1.0 - z)
        drh = dn_pre @ Wh[:, 2 * H:].T
        dr_pre = drh * h_prev * r * (1.0 - r)
        dh_prev += drh * r
        dgates[:, :H] = dz_pre
        dgates[:, H:2 * H] = dr_pre
        dgates[:, 2 * H:] = dn_pre
        gWh[:, :2 * H] += h_prev.T @ dgates[:, :2 * H]
        gWh[:, 2 * H:] += rh.T @ dn_pre
        dh_prev += dgates[:, :2 * H] @ Wh[:, :2 * H].T
        gWx += x.T @ dgates
        gb += dgates.sum(axis=0)
        np.add.at(gemb, inputs[:, t], dgates @ Wx.T)
        dh_next = dh_prev
    return value, grad.flat


def logprob_grad(params: PolicyParams, prompt, completion, weights) -> tuple[float, np.ndarray]:
    return batch_logprob_grad(params, [prompt], [completion], [weights])


# ------------------------------------------------------------------ sampling

@dataclass(frozen=True)
class SampleOut:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    terminated: bool


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.75
    top_p: float = 0.85
    max_len: int = 160
    greedy: bool = False


def response_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, step, response index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), int(index)]))


def _choose(logp_row: np.ndarray, temperature: float, top_p: float, greedy: bool,
            rng: np.random.Generator | None) -> int:
    if greedy:
        return int(np.argmax(logp_row))
    scaled = logp_row / temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    if top_p < 1.0:
        cum = np.cumsum(sorted_p)
        cut = int(np.searchsorted(cum, top_p, side="left")) + 1
        sorted_p = sorted_p[:cut]
        order = order[:cut]
    cum = np.cumsum(sorted_p)
    u = rng.random() * cum[-1]
    k = min(int(np.searchsorted(cum, u, side="right")), len(order) - 1)
    return int(order[k])


def sample_batch(params: PolicyParams, prompts, rngs, temperature: float = 0.75,
                 top_p: float = 0.85, max_len: int = 160, greedy: bool = False,
                 eos: int | None = None) -> list[SampleOut]:
    """Ancestral sampling for several prompts at once, one RNG stream per row.

    Recorded log-probabilities are the temperature-1 model values before any
    nucleus truncation.
    """
    if temperature <= 0 and not greedy:
        raise ValueError("temperature must be > 0")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    eos = default_vocab().id("EOS") if eos is None else eos
    B = len(prompts)
    if B == 0:
        return []
    inputs, lens = _pad([list(q) for q in prompts])
    hs, _ = _forward(params, inputs, keep_cache=False)
    h = hs[np.arange(B), lens - 1]
    toks = [[] for _ in range(B)]
    lps = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    Wo, bo, emb = params.Wo, params.bo, params.emb
    for _ in range(max_len):
        logp = _log_softmax(h @ Wo + bo)
        nxt = np.zeros(B, dtype=np.int64)
        for i in np.flatnonzero(alive):
            t = _choose(logp[i], temperature, top_p, greedy, rngs[i] if rngs else None)
            toks[i].append(t)
            lps[i].append(float(logp[i, t]))
            nxt[i] = t
            if t == eos:
                alive[i] = False
        if not alive.any():
            break
        h, _ = _cell(params, emb[nxt], h)
    return [SampleOut(tuple(t), tuple(l), bool(t and t[-1] == eos)) for t, l in zip(toks, lps)]


def sample(params: PolicyParams, prompt, temperature: float = 0.75, top_p: float = 0.85,
           max_len: int = 160, rng: np.random.Generator | None = None,
           greedy: bool = False) -> SampleOut:
    rng = np.random.default_rng(0) if rng is None else rng
    return sample_batch(params, [prompt], [rng], temperature, top_p, max_len, greedy)[0]


def greedy_decode(params: PolicyParams, prompt, max_len: int = 160) -> SampleOut:
    return sample_batch(params, [prompt], None, 1.0, 1.0, max_len, greedy=True)[0]
