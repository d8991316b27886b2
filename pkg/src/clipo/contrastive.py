"""Group contrastive losses over rollout embeddings and the clipped contrastive reward.

Correct rollouts in a group are anchors; another correct rollout is the
positive and every rollout in the group (the anchor itself included by
default) sits in the softmax denominator. The per-anchor loss becomes a
non-positive reward ``max(-lam * loss, clip_floor)`` that is added to the
binary verifier reward.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import AdamWState, Tensor
from .errors import ContractError, EmptyReductionError, InvalidAnchorError

log = logging.getLogger(__name__)

LOSS_KINDS = ("infonce", "supcon", "softnn")
DEFAULT_LAMBDA = {"infonce": 0.2, "supcon": 0.2, "softnn": 1.0}


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.05
    lam: float = 0.2
    loss_kind: str = "infonce"
    clip_floor: float = -0.5
    d: int = 32
    exclude_self: bool = False
    head_lr: float = 1e-3
    head_weight_decay: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError("tau must be > 0")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.clip_floor > 0:
            raise ContractError("clip_floor must be <= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.d < 1:
            raise ContractError("embedding dim d must be >= 1")


class DegenerateRolloutError(EmptyReductionError):
    pass


class ContrastiveHead:
    """Linear projection ``W in R^{d x D}`` trained by AdamW."""

    def __init__(self, W: np.ndarray, lr: float = 1e-3, weight_decay: float = 0.01, frozen: bool = False):
        self.W = Tensor(W, requires_grad=True, name="head.W")
        self.adamw = AdamWState.for_params([self.W], learning_rate=lr, weight_decay=weight_decay)
        self.frozen = frozen

    @classmethod
    def init(cls, D: int, d: int, seed: int = 0, **kw) -> "ContrastiveHead":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 1.0 / math.sqrt(D), size=(d, D)), **kw)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def hash(self) -> str:
        return ag.array_hash([self.W.data])


def pool(hidden) -> Tensor:
    """Mean over the sequence axis of a ``(T, D)`` block of response states."""
    hidden = ag.as_tensor(hidden)
    if hidden.shape[0] == 0:
        raise DegenerateRolloutError("cannot pool an empty response")
    return ag.mean_axis(hidden, axis=0)


def embed(head: ContrastiveHead, pooled) -> Tensor:
    """Unit-norm embedding(s) of pooled state(s); accepts ``(D,)`` or ``(G, D)``."""
    pooled = ag.as_tensor(pooled)
    if not np.all(np.isfinite(pooled.data)):
        raise ContractError("pooled representation is not finite")
    if pooled.ndim == 1:
        return ag.l2_normalize(ag.reshape(ag.matmul(head.W, ag.reshape(pooled, (-1, 1))), (-1,)))
    return ag.l2_normalize(ag.matmul(pooled, ag.transpose(head.W)))


def similarity_matrix(embs, tau: float) -> Tensor:
    embs = ag.as_tensor(embs)
    return ag.matmul(embs, ag.transpose(embs)) * (1.0 / tau)


def select_positive(anchor: int, positives: Sequence[int], rng: np.random.Generator) -> int:
    """Uniform draw from ``positives`` minus the anchor."""
    pos = sorted(set(positives))
    if anchor not in pos:
        raise InvalidAnchorError(f"anchor {anchor} is not in the positive set {pos}")
    others = [p for p in pos if p != anchor]
    if not others:
        raise InvalidAnchorError("anchor has no positive partner")
    return others[int(rng.integers(len(others)))]


def _row_log_softmax(sim, i: int, exclude_self: bool) -> Tensor:
    row = ag.index(ag.as_tensor(sim), i)
    if exclude_self:
        mask = np.zeros(row.shape)
        mask[i] = -np.inf
        row = row + mask
    return ag.log_softmax(row)


def infonce_anchor_loss(sim, i: int, p: int, exclude_self: bool = False) -> Tensor:
    if i == p:
        raise ContractError("anchor and positive must differ")
    return -ag.index(_row_log_softmax(sim, i, exclude_self), p)


def _partners(i: int, positives: Sequence[int]) -> list[int]:
    partners = sorted(set(positives) - {i})
    if not partners:
        raise InvalidAnchorError(f"anchor {i} has no positive partner")
    return partners


def supcon_anchor_loss(sim, i: int, positives: Sequence[int], exclude_self: bool = False) -> Tensor:
    partners = _partners(i, positives)
    lsm = _row_log_softmax(sim, i, exclude_self)
    return -ag.mean(ag.index(lsm, np.array(partners)))


def softnn_anchor_loss(sim, i: int, positives: Sequence[int], exclude_self: bool = False) -> Tensor:
    partners = _partners(i, positives)
    row = ag.index(ag.as_tensor(sim), i)
    # shift by the (constant) row max; the ratio is unchanged and cannot overflow
    shift = float(row.data.max())
    w = ag.exp(row - shift)
    is_pos = np.zeros(row.shape, dtype=bool)
    is_pos[partners] = True
    rest = ~is_pos
    if exclude_self:
        rest[i] = False
    pos_mass = ag.sum_(ag.index(w, np.flatnonzero(is_pos)))
    other_mass = ag.sum_(ag.index(w, np.flatnonzero(rest))) if rest.any() else 0.0
    return -ag.log(pos_mass / (pos_mass + other_mass))


def anchor_loss(kind: str, sim, i: int, positives: Sequence[int], rng: np.random.Generator | None, exclude_self: bool = False) -> Tensor:
    if kind == "infonce":
        return infonce_anchor_loss(sim, i, select_positive(i, positives, rng), exclude_self)
    if kind == "supcon":
        return supcon_anchor_loss(sim, i, positives, exclude_self)
    if kind == "softnn":
        return softnn_anchor_loss(sim, i, positives, exclude_self)
    raise ContractError(f"unknown loss kind {kind!r}")


def group_gate(group) -> bool:
    """Contrastive shaping applies only when ``1 < |P| < G``."""
    rewards = np.asarray(group.rewards if hasattr(group, "rewards") else group)
    n_pos = int((rewards == 1).sum())
    return 1 < n_pos < len(rewards)


@dataclass
class ShapedRewardSet:
    base: np.ndarray
    contrastive: np.ndarray
    total: np.ndarray
    group_valid: bool
    clipped_mask: np.ndarray
    anchor_losses: list = field(default_factory=list, repr=False, compare=False)
    anchor_index: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def unshaped(cls, base) -> "ShapedRewardSet":
        base = np.asarray(base, dtype=np.float64)
        zeros = np.zeros_like(base)
        return cls(base, zeros, base + zeros, False, np.zeros(base.shape, dtype=bool))


def contrastive_rewards(group, embs, cfg: ContrastiveConfig, rng: np.random.Generator | None) -> ShapedRewardSet:
    """Shaped rewards ``r + max(-lam * L, clip_floor)`` for the correct rollouts of a valid group.

    ``embs`` may live on a tape; the returned ``anchor_losses`` keep that graph
    so the head can be trained on the exact values that were rewarded.
    """
    base = np.asarray(group.rewards if hasattr(group, "rewards") else group, dtype=np.float64)
    if not group_gate(base):
        return ShapedRewardSet.unshaped(base)
    embs = ag.as_tensor(embs)
    if embs.shape[0] != len(base):
        raise ContractError(f"{embs.shape[0]} embeddings for {len(base)} rollouts")
    sim = similarity_matrix(embs, cfg.tau)
    positives = [i for i, r in enumerate(base) if r == 1]
    contrastive = np.zeros_like(base)
    clipped = np.zeros(base.shape, dtype=bool)
    losses, index = [], []
    for i in positives:
        loss = anchor_loss(cfg.loss_kind, sim, i, positives, rng, cfg.exclude_self)
        raw = -cfg.lam * loss.item()
        contrastive[i] = max(raw, cfg.clip_floor)
        clipped[i] = raw < cfg.clip_floor
        losses.append(loss)
        index.append(i)
    return ShapedRewardSet(base, contrastive, base + contrastive, True, clipped, losses, index)


def head_update(head: ContrastiveHead, losses: Sequence[Tensor], tape: ag.Tape | None = None) -> bool:
    """One AdamW step on ``W`` against the mean of ``losses``; returns whether W moved."""
    if head.frozen:
        log.info("contrastive head is frozen; skipping update")
        return False
    if not losses:
        return False
    if tape is None:
        raise ContractError("head_update needs the tape the losses were recorded on")
    head.W.grad = None
    with tape:
        total = losses[0]
        for l in losses[1:]:
            total = total + l
        mean_loss = total * (1.0 / len(losses))
    tape.backward(mean_loss)
    if head.W.grad is None:
        head.W.grad = np.zeros_like(head.W.data)
    ag.adamw_step([head.W], head.adamw)
    return True


def mi_lower_bound(mean_anchor_loss: float, G: int) -> float:
    """InfoNCE estimate ``ln G - loss`` of the mutual information between positives."""
    if G < 2:
        raise ContractError("need at least two candidates")
    return math.log(G) - float(mean_anchor_loss)


def paired_infonce_loss(eu, ev, tau: float) -> Tensor:
    """Classic paired InfoNCE: row ``i`` of ``eu`` must pick row ``i`` of ``ev`` among all rows."""
    eu, ev = ag.as_tensor(eu), ag.as_tensor(ev)
    logits = ag.matmul(eu, ag.transpose(ev)) * (1.0 / tau)
    lsm = ag.log_softmax(logits)
    n = eu.shape[0]
    return -ag.mean(ag.index(lsm, (np.arange(n), np.arange(n))))


def pair_cosines(embs: np.ndarray, rewards: np.ndarray) -> tuple[float | None, float | None]:
    """Mean cosine over positive pairs and over positive-negative pairs."""
    e = np.asarray(embs)
    pos = np.flatnonzero(np.asarray(rewards) == 1)
    neg = np.flatnonzero(np.asarray(rewards) != 1)
    cos = e @ e.T
    pp = [cos[i, j] for a, i in enumerate(pos) for j in pos[a + 1 :]]
    pn = [cos[i, j] for i in pos for j in neg]
    return (float(np.mean(pp)) if pp else None, float(np.mean(pn)) if pn else None)
