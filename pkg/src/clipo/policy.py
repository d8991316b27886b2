"""Tiny causal transformer policy with group sampling.

The policy exposes both next-token log-probabilities and the last-layer hidden
states (after the final layer norm), which the contrastive head pools.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .errors import CheckpointError, ContractError, LengthError
from .tasks import EOS, PAD, VOCAB_SIZE, TaskInstance, verify, vocab_hash

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyDims:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 96
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def param_count(self) -> int:
        V, D, T, L, F = self.vocab_size, self.d_model, self.max_len, self.n_layers, self.ffn_mult
        per_layer = 4 * D + 4 * D * D + 2 * F * D * D
        return V * D + T * D + L * per_layer + 2 * D + D * V


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_response_len: int = 24
    group_size: int = 16

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ContractError("top_p must lie in (0, 1]")
        if self.group_size < 2:
            raise ContractError("group_size must be >= 2")
        if self.max_response_len < 1:
            raise ContractError("max_response_len must be >= 1")


class PolicyParams:
    """Named parameter tensors in a fixed declaration order."""

    def __init__(self, dims: PolicyDims, tensors: dict[str, Tensor]):
        self.dims = dims
        self.tensors = tensors

    @staticmethod
    def layout(dims: PolicyDims) -> list[tuple[str, tuple[int, ...]]]:
        V, D, T, F = dims.vocab_size, dims.d_model, dims.max_len, dims.ffn_mult
        out = [("tok_emb", (V, D)), ("pos_emb", (T, D))]
        for l in range(dims.n_layers):
            p = f"block{l}."
            out += [
                (p + "ln1_scale", (D,)),
                (p + "ln1_offset", (D,)),
                (p + "wq", (D, D)),
                (p + "wk", (D, D)),
                (p + "wv", (D, D)),
                (p + "wo", (D, D)),
                (p + "ln2_scale", (D,)),
                (p + "ln2_offset", (D,)),
                (p + "ff_in", (D, F * D)),
                (p + "ff_out", (F * D, D)),
            ]
        out += [("lnf_scale", (D,)), ("lnf_offset", (D,)), ("w_out", (D, V))]
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def hash(self) -> str:
        return ag.array_hash([t.data for t in self.tensors.values()])

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.dims, {k: Tensor(t.data, requires_grad=True, name=k) for k, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, dims: PolicyDims, arrays: dict[str, np.ndarray]) -> "PolicyParams":
        tensors = {}
        for name, shape in cls.layout(dims):
            if name not in arrays:
                raise CheckpointError(f"parameter {name!r} missing")
            if tuple(arrays[name].shape) != shape:
                raise CheckpointError(f"parameter {name!r} has shape {arrays[name].shape}, expected {shape}")
            tensors[name] = Tensor(arrays[name], requires_grad=True, name=name)
        return cls(dims, tensors)


def init(dims: PolicyDims = PolicyDims(), seed: int = 0) -> PolicyParams:
    """Gaussian init with std 1/sqrt(fan_in); the output projection uses 1/D so
    the initial next-token distribution is close to uniform."""
    rng = np.random.default_rng(seed)
    D = dims.d_model
    tensors = {}
    for name, shape in PolicyParams.layout(dims):
        if name.endswith("_scale"):
            arr = np.ones(shape)
        elif name.endswith("_offset"):
            arr = np.zeros(shape)
        elif name == "w_out":
            arr = rng.normal(0.0, 1.0 / D, size=shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 1.0 / math.sqrt(D), size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return PolicyParams(dims, tensors)


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> np.ndarray:
    if T not in _MASKS:
        _MASKS[T] = np.triu(np.full((T, T), -np.inf), k=1)
    return _MASKS[T]


def _linear(x: Tensor, w: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = ag.matmul(ag.reshape(x, (-1, x.shape[-1])), w)
    return ag.reshape(y, lead + (w.shape[-1],))


def forward(params: PolicyParams, tokens) -> tuple[Tensor, Tensor]:
    """Logits ``(B, T, V)`` and final-norm hidden states ``(B, T, D)``.

    A 1-D token sequence is treated as a batch of one and the batch axis is
    dropped again on return.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    squeeze = toks.ndim == 1
    if squeeze:
        toks = toks[None, :]
    B, T = toks.shape
    dims = params.dims
    if T > dims.max_len:
        raise LengthError(f"sequence length {T} exceeds max_len {dims.max_len}")
    if T == 0:
        raise LengthError("empty token sequence")
    D, H = dims.d_model, dims.n_heads
    hd = D // H
    x = ag.embedding(params["tok_emb"], toks) + ag.index(params["pos_emb"], slice(0, T))
    mask = _causal_mask(T)
    scale = 1.0 / math.sqrt(hd)
    for l in range(dims.n_layers):
        p = f"block{l}."
        h = ag.layer_norm(x, params[p + "ln1_scale"], params[p + "ln1_offset"])

        def heads(w):
            return ag.transpose(ag.reshape(_linear(h, params[p + w]), (B, T, H, hd)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        att = ag.softmax(ag.matmul(q, ag.swap_last(k)) * scale + mask)
        y = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
        x = x + _linear(y, params[p + "wo"])
        h2 = ag.layer_norm(x, params[p + "ln2_scale"], params[p + "ln2_offset"])
        x = x + _linear(ag.gelu(_linear(h2, params[p + "ff_in"])), params[p + "ff_out"])
    hidden = ag.layer_norm(x, params["lnf_scale"], params["lnf_offset"])
    logits = _linear(hidden, params["w_out"])
    if squeeze:
        return ag.reshape(logits, (T, dims.vocab_size)), ag.reshape(hidden, (T, D))
    return logits, hidden


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutRecord:
    prompt_len: int
    tokens: np.ndarray
    response_logprobs: np.ndarray
    hidden_states: np.ndarray
    reward: int = 0
    truncated: bool = False

    @property
    def response(self) -> np.ndarray:
        return self.tokens[self.prompt_len :]

    @property
    def response_len(self) -> int:
        return len(self.tokens) - self.prompt_len


@dataclass
class RolloutGroup:
    instance: TaskInstance
    rollouts: list[RolloutRecord] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=np.float64)

    @property
    def positive_index_set(self) -> list[int]:
        return [i for i, r in enumerate(self.rollouts) if r.reward == 1]

    def __len__(self) -> int:
        return len(self.rollouts)


def _pick_tokens(logits: np.ndarray, temperature: float, top_p: float, uniforms: np.ndarray) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    if top_p < 1.0:
        order = np.argsort(-p, axis=-1, kind="stable")
        ps = np.take_along_axis(p, order, axis=-1)
        keep_sorted = (np.cumsum(ps, axis=-1) - ps) < top_p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        p = np.where(keep, p, 0.0)
        p /= p.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf <= (uniforms * cdf[:, -1])[:, None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def _ln(x, scale, offset, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * scale + offset


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * x * (1.0 + 0.044715 * x * x)))


class _CachedDecoder:
    """Plain-numpy incremental forward with a key/value cache (sampling only)."""

    def __init__(self, params: PolicyParams, batch: int, width: int):
        d = params.dims
        self.p = params.arrays()
        self.dims = d
        self.hd = d.d_model // d.n_heads
        self.k = np.zeros((d.n_layers, batch, d.n_heads, width, self.hd))
        self.v = np.zeros_like(self.k)
        self.t = 0

    def step(self, tokens: np.ndarray) -> np.ndarray:
        p, d, t, hd = self.p, self.dims, self.t, self.hd
        B, H = len(tokens), d.n_heads
        x = p["tok_emb"][tokens] + p["pos_emb"][t]
        for l in range(d.n_layers):
            pre = f"block{l}."
            h = _ln(x, p[pre + "ln1_scale"], p[pre + "ln1_offset"])
            q = (h @ p[pre + "wq"]).reshape(B, H, 1, hd)
            self.k[l, :, :, t] = (h @ p[pre + "wk"]).reshape(B, H, hd)
            self.v[l, :, :, t] = (h @ p[pre + "wv"]).reshape(B, H, hd)
            s = (q @ np.swapaxes(self.k[l, :, :, : t + 1], -1, -2)) / math.sqrt(hd)
            s = np.exp(s - s.max(axis=-1, keepdims=True))
            s /= s.sum(axis=-1, keepdims=True)
            y = (s @ self.v[l, :, :, : t + 1]).reshape(B, d.d_model)
            x = x + y @ p[pre + "wo"]
            h2 = _ln(x, p[pre + "ln2_scale"], p[pre + "ln2_offset"])
            x = x + _gelu(h2 @ p[pre + "ff_in"]) @ p[pre + "ff_out"]
        self.t += 1
        return _ln(x, p["lnf_scale"], p["lnf_offset"]) @ p["w_out"]


def generate(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    cfg: SamplingConfig,
    rngs: Sequence[np.random.Generator] | None,
    greedy: bool = False,
    score_outputs: bool = True,
) -> list[RolloutRecord]:
    """Ancestral sampling, one sequence per prompt and one rng stream per sequence.

    The stored log-probabilities are those of the untempered policy, so they
    equal :func:`logprobs_under` at the same parameters.
    """
    B = len(prompts)
    if B == 0:
        return []
    plen = np.array([len(p) for p in prompts])
    budget = np.minimum(cfg.max_response_len, params.dims.max_len - plen)
    if np.any(budget < 1):
        raise LengthError("prompt leaves no room for a response within max_len")
    width = int((plen + budget).max())
    seqs = np.full((B, width), PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        seqs[i, : len(p)] = p
    lens = plen.copy()
    done = np.zeros(B, dtype=bool)
    dec = _CachedDecoder(params, B, width)
    for t in range(width - 1):
        live = ~done & (lens - plen < budget)
        if not live.any():
            break
        logits = dec.step(seqs[:, t])
        # rows still reading their prompt just fill the cache
        emit = live & (lens == t + 1)
        if not emit.any():
            continue
        rows = np.flatnonzero(emit)
        if greedy:
            nxt = logits[rows].argmax(axis=-1)
        else:
            u = np.array([rngs[i].random() for i in rows])
            nxt = _pick_tokens(logits[rows], cfg.temperature, cfg.top_p, u)
        seqs[rows, t + 1] = nxt
        lens[rows] += 1
        done[rows] |= nxt == EOS
    records = [
        RolloutRecord(int(plen[i]), seqs[i, : lens[i]].copy(), np.empty(0), np.empty((0, params.dims.d_model)), truncated=not done[i])
        for i in range(B)
    ]
    if not score_outputs:
        return records
    lp, mask, hidden = score(params, records)
    for i, rec in enumerate(records):
        n = rec.response_len
        rec.response_logprobs = lp.data[i, :n].copy()
        rec.hidden_states = hidden[i, :n].copy()
    return records


def sample_group(
    params: PolicyParams,
    instance: TaskInstance,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> RolloutGroup:
    return sample_groups(params, [instance], cfg, [rng])[0]


def sample_groups(
    params: PolicyParams,
    instances: Sequence[TaskInstance],
    cfg: SamplingConfig,
    rngs: Sequence[np.random.Generator],
    score_outputs: bool = True,
) -> list[RolloutGroup]:
    """``cfg.group_size`` rollouts per instance, generated as one batch.

    Each instance's generator is split into one child stream per rollout, so
    batching does not change any sample.
    """
    G = cfg.group_size
    prompts, streams = [], []
    for inst, rng in zip(instances, rngs):
        prompts += [inst.prompt_tokens] * G
        streams += rng.spawn(G)
    records = generate(params, prompts, cfg, streams, score_outputs=score_outputs)
    groups = []
    for k, inst in enumerate(instances):
        recs = records[k * G : (k + 1) * G]
        for r in recs:
            r.reward = verify(inst, r.response)
        groups.append(RolloutGroup(inst, recs))
    return groups


def _response_grid(rollouts: Sequence[RolloutRecord]):
    B = len(rollouts)
    width = max(len(r.tokens) for r in rollouts)
    n_resp = np.array([r.response_len for r in rollouts])
    Lr = int(n_resp.max())
    toks = np.full((B, width), PAD, dtype=np.int64)
    for i, r in enumerate(rollouts):
        toks[i, : len(r.tokens)] = r.tokens
    mask = np.arange(Lr)[None, :] < n_resp[:, None]
    plen = np.array([r.prompt_len for r in rollouts])
    # position whose logits predict response token t, and the position of token t itself
    tok_pos = np.where(mask, plen[:, None] + np.arange(Lr)[None, :], 0)
    pred_pos = np.where(mask, tok_pos - 1, 0)
    target = np.where(mask, toks[np.arange(B)[:, None], tok_pos], PAD)
    return toks, mask, pred_pos, tok_pos, target


def score(params: PolicyParams, rollouts: Sequence[RolloutRecord], keep_hidden_graph: bool = False):
    """Differentiable response log-probs ``(B, Lr)``, their mask, and response hidden states.

    Hidden states come back as a numpy array unless ``keep_hidden_graph``.
    Masked slots hold exactly zero.
    """
    toks, mask, pred_pos, tok_pos, target = _response_grid(rollouts)
    B = len(rollouts)
    rows = np.arange(B)[:, None]
    logits, hidden = forward(params, toks)
    logp_all = ag.log_softmax(logits)
    lp = ag.index(logp_all, (np.broadcast_to(rows, pred_pos.shape), pred_pos, target)) * mask
    h = ag.index(hidden, (np.broadcast_to(rows, tok_pos.shape), tok_pos))
    if not keep_hidden_graph:
        h = h.data * mask[..., None]
    return lp, mask, h


def logprobs_under(params: PolicyParams, rollouts) -> tuple[Tensor, np.ndarray]:
    """Response-token log pi(y_t | y_<t, x) under ``params`` (prompt excluded)."""
    if isinstance(rollouts, RolloutGroup):
        rollouts = rollouts.rollouts
    lp, mask, _ = score(params, rollouts)
    return lp, mask


def stored_logprobs(rollouts: Sequence[RolloutRecord]) -> tuple[np.ndarray, np.ndarray]:
    Lr = max(r.response_len for r in rollouts)
    out = np.zeros((len(rollouts), Lr))
    mask = np.zeros((len(rollouts), Lr), dtype=bool)
    for i, r in enumerate(rollouts):
        out[i, : r.response_len] = r.response_logprobs
        mask[i, : r.response_len] = True
    return out, mask


# ---------------------------------------------------------------- warm-up


def supervised_pretrain(
    params: PolicyParams,
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 64,
    seed: int = 0,
    weight_decay: float = 0.0,
) -> list[float]:
    """Cross-entropy on response tokens only; updates ``params`` in place.

    Returns the per-step training loss.
    """
    if steps <= 0 or not corpus:
        return []
    rng = np.random.default_rng(seed)
    opt = ag.AdamWState.for_params(params.list(), learning_rate=lr, weight_decay=weight_decay)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(corpus), size=min(batch_size, len(corpus)))
        batch = [
            RolloutRecord(len(corpus[i][0]), np.array(list(corpus[i][0]) + list(corpus[i][1])), np.empty(0), np.empty(0))
            for i in idx
        ]
        ag.zero_grads(params.list())
        with ag.Tape() as tape:
            lp, mask, _ = score(params, batch)
            loss = -lp.sum() / float(mask.sum())
        tape.backward(loss)
        ag.adamw_step(params.list(), opt)
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------- checkpoints


def save_policy(path, params: PolicyParams, step: int = 0, rng_state=None, extra: dict | None = None) -> None:
    header = {
        "kind": "policy",
        "dims": asdict(params.dims),
        "vocab_hash": vocab_hash(),
        "step": step,
        "rng_state": rng_state,
    }
    if extra:
        header.update(extra)
    checkpoint.save(path, header, {f"policy/{k}": v for k, v in params.arrays().items()})


def params_from_checkpoint(header: dict, arrays: dict[str, np.ndarray], prefix: str = "policy/") -> PolicyParams:
    if header.get("vocab_hash") != vocab_hash():
        raise CheckpointError(f"field 'vocab_hash' is {header.get('vocab_hash')!r}, expected {vocab_hash()!r}")
    try:
        dims = PolicyDims(**header["dims"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"field 'dims' is invalid: {exc}") from None
    sub = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
    return PolicyParams.from_arrays(dims, sub)


def load_policy(path) -> tuple[PolicyParams, dict]:
    header, arrays = checkpoint.load(path)
    return params_from_checkpoint(header, arrays), header
