"""Group-relative advantages and the GRPO / GSPO / DAPO / GMPO surrogate losses.

Every surrogate is returned as a loss to *minimize* (the negated objective).
Per-token quantities are ``(B, L)`` grids with a boolean ``mask`` marking real
response tokens; advantages are per rollout and broadcast over its tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError

METHODS = ("grpo", "gspo", "dapo", "gmpo")
AGG_MODES = ("token-mean", "seq-mean-token-mean")

_METHOD_DEFAULTS = {
    "grpo": dict(eps_low=0.2, eps_high=0.2, kl_coef=0.001, agg_mode="token-mean", dynamic_sampling=False),
    "gspo": dict(eps_low=3e-4, eps_high=4e-4, kl_coef=0.0, agg_mode="seq-mean-token-mean", dynamic_sampling=False),
    "dapo": dict(eps_low=0.2, eps_high=0.28, kl_coef=0.0, agg_mode="token-mean", dynamic_sampling=True),
    "gmpo": dict(eps_low=0.4, eps_high=0.4, kl_coef=0.0, agg_mode="token-mean", dynamic_sampling=False),
}


@dataclass(frozen=True)
class SurrogateConfig:
    method: str = "grpo"
    eps_low: float = 0.2
    eps_high: float = 0.2
    kl_coef: float = 0.001
    agg_mode: str = "token-mean"
    dynamic_sampling: bool = False
    std_guard: float = 1e-6
    pessimistic: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.agg_mode not in AGG_MODES:
            raise ContractError(f"agg_mode must be one of {AGG_MODES}, got {self.agg_mode!r}")
        if self.kl_coef < 0 or self.eps_low < 0 or self.eps_high < 0:
            raise ContractError("clip ranges and kl_coef must be non-negative")
        if self.eps_low >= 1:
            raise ContractError("eps_low must be < 1 so the lower clip bound stays positive")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "SurrogateConfig":
        if method not in _METHOD_DEFAULTS:
            raise ContractError(f"method must be one of {METHODS}, got {method!r}")
        return cls(method=method, **{**_METHOD_DEFAULTS[method], **overrides})

    def with_(self, **kw) -> "SurrogateConfig":
        return replace(self, **kw)


def method_defaults() -> dict[str, dict]:
    return {m: dict(v) for m, v in _METHOD_DEFAULTS.items()}


# ---------------------------------------------------------------- advantages


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    rewards: np.ndarray

    def per_token(self, mask: np.ndarray) -> np.ndarray:
        return self.advantages[:, None] * np.asarray(mask, dtype=np.float64)


def group_advantages(shaped, std_guard: float = 1e-6) -> AdvantageSet:
    """``(r' - mean) / popstd`` over one group; all zeros when ``popstd <= std_guard``."""
    r = np.asarray(getattr(shaped, "total", shaped), dtype=np.float64)
    if r.size < 2:
        raise ContractError("a group needs at least two rollouts")
    centered = r - r.mean()
    std = float(np.sqrt(np.mean(centered * centered)))
    if std <= std_guard:
        return AdvantageSet(np.zeros_like(r), r)
    return AdvantageSet(centered / std, r)


def dynamic_sampling_filter(groups: Sequence) -> tuple[list, int]:
    """Drop groups whose raw verifier rewards are all equal; returns ``(kept, n_dropped)``."""
    kept = []
    for g in groups:
        r = np.asarray(g.rewards)
        if r.size and np.all(r == r[0]):
            continue
        kept.append(g)
    return kept, len(groups) - len(kept)


# ---------------------------------------------------------------- per-token pieces


def token_ratios(new_logprobs, old_logprobs, mask=None) -> Tensor:
    """``exp(new - old)`` per token; masked slots are exactly 1."""
    new = ag.as_tensor(new_logprobs)
    old = np.asarray(old_logprobs, dtype=np.float64)
    if new.shape != old.shape:
        raise ContractError(f"misaligned token grids {new.shape} vs {old.shape}")
    diff = new - old
    if mask is not None:
        diff = diff * np.asarray(mask, dtype=np.float64)
    return ag.exp(diff)


def kl_estimate(new_logprobs, ref_logprobs, mask=None) -> Tensor:
    """Per-token ``exp(ref - new) - (ref - new) - 1`` (non-negative, zero on-policy)."""
    new = ag.as_tensor(new_logprobs)
    ref = np.asarray(ref_logprobs, dtype=np.float64)
    if new.shape != ref.shape:
        raise ContractError(f"misaligned token grids {new.shape} vs {ref.shape}")
    d = ref - new
    if mask is not None:
        d = d * np.asarray(mask, dtype=np.float64)
    return ag.exp(d) - d - 1.0


def _mask_of(ratio: Tensor, mask) -> np.ndarray:
    if mask is None:
        return np.ones(ratio.shape)
    return np.asarray(mask, dtype=np.float64)


def _adv_grid(adv, shape) -> np.ndarray:
    a = np.asarray(adv, dtype=np.float64)
    if a.ndim == 1:
        a = np.broadcast_to(a[:, None], shape)
    if a.shape != tuple(shape):
        raise ContractError(f"advantages of shape {a.shape} do not fit token grid {shape}")
    return a


def aggregate(per_token, mask: np.ndarray, mode: str) -> Tensor:
    per_token = ag.as_tensor(per_token)
    m = np.asarray(mask, dtype=np.float64)
    if mode == "token-mean":
        return ag.sum_(per_token * m) * (1.0 / m.sum())
    if mode == "seq-mean-token-mean":
        lengths = m.sum(axis=1)
        per_seq = ag.sum_(per_token * m, axis=1) * (1.0 / lengths)
        return ag.mean(per_seq)
    raise ContractError(f"unknown agg_mode {mode!r}")


def _kl_term(cfg: SurrogateConfig, kl, mask):
    if cfg.kl_coef == 0:
        return 0.0
    if kl is None:
        raise ContractError("kl_coef > 0 requires per-token KL values")
    return aggregate(kl, mask, "token-mean") * cfg.kl_coef


def clipped_token_objective(ratio, adv, mask, eps_low: float, eps_high: float, pessimistic: bool = True) -> Tensor:
    ratio = ag.as_tensor(ratio)
    A = _adv_grid(adv, ratio.shape)
    clipped = ag.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * A
    if not pessimistic:
        return clipped
    return ag.minimum(ratio * A, clipped)


def grpo_surrogate(ratio, adv, cfg: SurrogateConfig, mask=None, kl=None) -> Tensor:
    """Negated PPO-style clipped objective, aggregated per ``cfg.agg_mode``, plus ``beta * KL``."""
    ratio = ag.as_tensor(ratio)
    m = _mask_of(ratio, mask)
    term = clipped_token_objective(ratio, adv, m, cfg.eps_low, cfg.eps_high, cfg.pessimistic)
    return -aggregate(term, m, cfg.agg_mode) + _kl_term(cfg, kl, m)


def dapo_surrogate(ratio, adv, cfg: SurrogateConfig, mask=None, kl=None) -> Tensor:
    # same clipped term; the asymmetric range and zero KL come from the config
    return grpo_surrogate(ratio, adv, cfg, mask, kl)


def sequence_ratios(new_logprobs, old_logprobs, mask) -> Tensor:
    """Length-normalised sequence likelihood ratio ``exp(mean_t (new - old))``."""
    new = ag.as_tensor(new_logprobs)
    m = np.asarray(mask, dtype=np.float64)
    diff = (new - np.asarray(old_logprobs, dtype=np.float64)) * m
    return ag.exp(ag.sum_(diff, axis=1) * (1.0 / m.sum(axis=1)))


def gspo_surrogate(new_logprobs, old_logprobs, adv, cfg: SurrogateConfig, mask=None, kl=None) -> Tensor:
    """Sequence-level clipped objective; each rollout contributes one term."""
    new = ag.as_tensor(new_logprobs)
    m = _mask_of(new, mask)
    s = sequence_ratios(new, old_logprobs, m)
    A = np.asarray(adv, dtype=np.float64)
    if A.ndim != 1:
        A = A[:, 0]
    clipped = ag.clip(s, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * A
    term = ag.minimum(s * A, clipped) if cfg.pessimistic else clipped
    # seq-mean-token-mean of a per-sequence constant is the plain sequence mean
    if cfg.agg_mode == "seq-mean-token-mean":
        obj = ag.mean(term)
    else:
        lengths = m.sum(axis=1)
        obj = ag.sum_(term * lengths) * (1.0 / lengths.sum())
    return -obj + _kl_term(cfg, kl, m)


def gmpo_surrogate(new_logprobs, old_logprobs, adv, cfg: SurrogateConfig, mask=None, kl=None) -> Tensor:
    """Advantage-weighted geometric mean of clipped token ratios, computed in log space.

    With ``cfg.pessimistic`` the clip is sign-aware (the log-ratio is capped
    only in the direction that would increase the objective), which makes
    length-1 rollouts reproduce the pessimistic GRPO term exactly.
    """
    new = ag.as_tensor(new_logprobs)
    m = _mask_of(new, mask)
    A = np.asarray(adv, dtype=np.float64)
    if A.ndim != 1:
        A = A[:, 0]
    logr = (new - np.asarray(old_logprobs, dtype=np.float64)) * m
    lo, hi = math.log(1.0 - cfg.eps_low), math.log(1.0 + cfg.eps_high)
    clipped = ag.clip(logr, lo, hi)
    if cfg.pessimistic:
        sgn = np.sign(A)[:, None] * np.ones(logr.shape)
        capped = ag.minimum(logr * sgn, clipped * sgn) * sgn
    else:
        capped = clipped
    lengths = m.sum(axis=1)
    g = ag.exp(ag.sum_(capped * m, axis=1) * (1.0 / lengths))
    term = g * A
    if cfg.agg_mode == "token-mean":
        obj = ag.sum_(term * lengths) * (1.0 / lengths.sum())
    else:
        obj = ag.mean(term)
    return -obj + _kl_term(cfg, kl, m)


def surrogate_loss(cfg: SurrogateConfig, new_logprobs, old_logprobs, adv, mask, kl=None) -> Tensor:
    """Dispatch on ``cfg.method``."""
    if cfg.method in ("grpo", "dapo"):
        ratio = token_ratios(new_logprobs, old_logprobs, mask)
        return grpo_surrogate(ratio, adv, cfg, mask, kl)
    if cfg.method == "gspo":
        return gspo_surrogate(new_logprobs, old_logprobs, adv, cfg, mask, kl)
    if cfg.method == "gmpo":
        return gmpo_surrogate(new_logprobs, old_logprobs, adv, cfg, mask, kl)
    raise ContractError(f"unknown method {cfg.method!r}")
