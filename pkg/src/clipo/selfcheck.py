"""Release gate: gradient checks, closed-form loss identities, surrogate
equivalences and one hand-traced training step.

Every check reports its name, tolerance and measured value. The suite is
deliberately small enough to run in a few seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autograd as ag
from . import config as config_mod
from . import contrastive as cl
from . import objectives as obj
from . import policy as pm
from . import trainer
from .autograd import Tensor
from .policy import PolicyDims, RolloutGroup, RolloutRecord
from .tasks import ANS_CLOSE, ANS_OPEN, EOS, TaskFamily, generate, number_tokens

HAND_E = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
# -ln(e^2 / (2 e^2 + 1 + e^-2)), evaluated to 40 digits
HAND_INFONCE = 0.76716450530636900598


@dataclass
class CheckResult:
    name: str
    tolerance: float
    measured: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<48} tol={self.tolerance:.1e}  measured={self.measured:.3e}"


def _result(name: str, tol: float, measured: float) -> CheckResult:
    return CheckResult(name, tol, float(measured), bool(np.isfinite(measured) and measured <= tol))


# ---------------------------------------------------------------- gradients


def grad_rel_error(f: Callable[[Tensor], Tensor], x0: np.ndarray, h: float = 1e-6, coords: np.ndarray | None = None) -> float:
    """``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` over all (or the given flat) coordinates."""
    x = Tensor(x0, requires_grad=True)
    with ag.Tape() as tape:
        y = f(x)
    tape.backward(y)
    g = x.grad.reshape(-1)

    def scalar(arr):
        return f(Tensor(arr)).item()

    if coords is None:
        fd = ag.finite_diff_grad(scalar, x0, h).reshape(-1)
        ga = g
    else:
        fd = np.empty(len(coords))
        flat = x0.reshape(-1)
        for k, c in enumerate(coords):
            xp, xm = flat.copy(), flat.copy()
            xp[c] += h
            xm[c] -= h
            fd[k] = (scalar(xp.reshape(x0.shape)) - scalar(xm.reshape(x0.shape))) / (2 * h)
        ga = g[coords]
    return ag.relative_error(ga, fd)


def _unit_rows(rng, G, d):
    e = rng.normal(size=(G, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _loss_fns(kind: str, G: int, positives, tau: float):
    def on_embs(raw):
        embs = ag.l2_normalize(raw)
        sim = cl.similarity_matrix(embs, tau)
        if kind == "infonce":
            return cl.infonce_anchor_loss(sim, positives[0], positives[1])
        if kind == "supcon":
            return cl.supcon_anchor_loss(sim, positives[0], positives)
        return cl.softnn_anchor_loss(sim, positives[0], positives)

    return on_embs


def tiny_policy(seed: int = 0) -> pm.PolicyParams:
    return pm.init(PolicyDims(d_model=8, n_layers=1, n_heads=2, max_len=24), seed)


def tiny_rollouts(params: pm.PolicyParams, seed: int, n: int = 3) -> list[RolloutRecord]:
    rng = np.random.default_rng(seed)
    fam = TaskFamily(n_operands=2)
    out = []
    for k in range(n):
        inst = generate(fam, int(rng.integers(1 << 30)))
        L = 1 + k % 3
        resp = rng.integers(0, params.dims.vocab_size, size=L)
        out.append(RolloutRecord(len(inst.prompt_tokens), np.array(list(inst.prompt_tokens) + list(resp)), np.empty(0), np.empty(0)))
    lp, mask, hidden = pm.score(params, out)
    for i, r in enumerate(out):
        r.response_logprobs = lp.data[i, : r.response_len].copy()
        r.hidden_states = hidden[i, : r.response_len].copy()
    return out


def policy_grad_error(loss_of_params: Callable[[pm.PolicyParams], Tensor], params: pm.PolicyParams, n_coords: int, seed: int, h: float = 1e-6) -> float:
    """Relative error of tape vs central-difference gradients over random parameter coordinates."""
    ag.zero_grads(params.list())
    with ag.Tape() as tape:
        loss = loss_of_params(params)
    tape.backward(loss)
    names = params.names()
    sizes = [params[n].data.size for n in names]
    flat_grad = np.concatenate([(params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)).reshape(-1) for n in names])
    rng = np.random.default_rng(seed)
    coords = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    fd = np.empty(len(coords))
    for k, c in enumerate(coords):
        j = int(np.searchsorted(offsets, c, side="right") - 1)
        t = params[names[j]]
        flat = t.data.reshape(-1)
        orig = flat[c - offsets[j]]
        vals = []
        for sgn in (1, -1):
            flat[c - offsets[j]] = orig + sgn * h
            vals.append(loss_of_params(params).item())
        flat[c - offsets[j]] = orig
        fd[k] = (vals[0] - vals[1]) / (2 * h)
    ag.zero_grads(params.list())
    return ag.relative_error(flat_grad[coords], fd)


def surrogate_closure(method: str, rollouts, seed: int, kl_coef: float | None = None):
    """Loss of ``params`` for a fixed off-policy batch with random advantages."""
    rng = np.random.default_rng(seed)
    old, mask = pm.stored_logprobs(rollouts)
    # push the behaviour policy slightly away so ratios are not all 1
    old = old + rng.normal(scale=0.05, size=old.shape) * mask
    ref = old + rng.normal(scale=0.05, size=old.shape) * mask
    adv = rng.normal(size=len(rollouts))
    over = {} if kl_coef is None else {"kl_coef": kl_coef}
    # wide clip ranges keep the check away from the clip kinks
    over.update(eps_low=0.5, eps_high=0.5)
    cfg = obj.SurrogateConfig.for_method(method, **over)

    def f(params):
        new, m = pm.logprobs_under(params, rollouts)
        kl = obj.kl_estimate(new, ref, m) if cfg.kl_coef > 0 else None
        return obj.surrogate_loss(cfg, new, old, adv, m, kl)

    return f


def gradient_checks(n_seeds: int = 5) -> list[CheckResult]:
    out = []
    tol = 1e-5
    worst = {}

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=5)
        track("grad: log_softmax . dot", grad_rel_error(lambda t: ag.sum_(ag.log_softmax(t) * w), x))
        track("grad: layer_norm + gelu", grad_rel_error(lambda t: ag.sum_(ag.gelu(ag.layer_norm(t, np.ones(5), np.zeros(5))) * w), x))
        G, d = 6, 4
        raw = rng.normal(size=(G, d))
        for kind in cl.LOSS_KINDS:
            positives = [0, 2, 3]
            track(f"grad: {kind} wrt embeddings", grad_rel_error(_loss_fns(kind, G, positives, 0.5), raw))
        D = 5
        pooled = rng.normal(size=(G, D))
        W0 = rng.normal(size=(d, D))
        for kind in cl.LOSS_KINDS:
            def loss_w(Wt, kind=kind):
                head = cl.ContrastiveHead(np.zeros((d, D)))
                head.W = Wt
                embs = cl.embed(head, Tensor(pooled))
                sim = cl.similarity_matrix(embs, 0.5)
                return cl.anchor_loss(kind, sim, 0, [0, 1, 4], np.random.default_rng(seed))

            track(f"grad: {kind} wrt head W", grad_rel_error(loss_w, W0))
    params = tiny_policy(0)
    for seed in range(max(1, n_seeds // 2)):
        rollouts = tiny_rollouts(params, seed)
        for method in obj.METHODS:
            track(f"grad: {method} surrogate wrt policy", policy_grad_error(surrogate_closure(method, rollouts, seed, kl_coef=0.1), params, 24, seed))
        corpus_lp = lambda p: -pm.logprobs_under(p, rollouts)[0].sum()
        track("grad: supervised cross-entropy wrt policy", policy_grad_error(corpus_lp, params, 24, seed))
    for name, err in worst.items():
        out.append(_result(name, tol, err))
    return out


# ---------------------------------------------------------------- identities


def identity_checks() -> list[CheckResult]:
    out = []
    for G in (4, 16, 32):
        embs = np.tile(np.array([[0.6, 0.8, 0.0]]), (G, 1))
        sim = cl.similarity_matrix(embs, 0.05)
        for kind in cl.LOSS_KINDS:
            val = cl.anchor_loss(kind, sim, 0, [0, 1], np.random.default_rng(0)).item()
            out.append(_result(f"identity: {kind} identical embeddings G={G}", 1e-9, abs(val - math.log(G))))
    sim = cl.similarity_matrix(HAND_E, 0.5)
    hand = cl.infonce_anchor_loss(sim, 0, 1).item()
    out.append(_result("identity: hand case InfoNCE", 1e-6, abs(hand - HAND_INFONCE)))
    rs = cl.contrastive_rewards([1, 1, 0, 0], HAND_E, cl.ContrastiveConfig(tau=0.5, lam=0.2), np.random.default_rng(0))
    out.append(_result("identity: hand case r^CL (lambda=0.2)", 1e-6, abs(rs.contrastive[0] - (-0.2 * HAND_INFONCE))))
    embs = np.tile(np.array([[1.0, 0.0]]), (16, 1))
    rs = cl.contrastive_rewards([1] * 8 + [0] * 8, embs, cl.ContrastiveConfig(lam=0.2), np.random.default_rng(0))
    out.append(_result("identity: clip floor binds at G=16", 0.0, float(np.max(np.abs(rs.contrastive[:8] + 0.5)))))
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        e = _unit_rows(rng, 8, 3)
        sim = cl.similarity_matrix(e, 0.1)
        a = cl.infonce_anchor_loss(sim, 0, 3).item()
        b = cl.supcon_anchor_loss(sim, 0, [0, 3]).item()
        c = cl.softnn_anchor_loss(sim, 0, [0, 3]).item()
        worst = max(worst, abs(a - b), abs(a - c))
    out.append(_result("identity: single-partner variants agree", 1e-12, worst))
    out.append(_result("identity: MI bound hand case", 1e-12, abs(cl.mi_lower_bound(HAND_INFONCE, 4) - 0.61912985581352161285)))
    return out


# ---------------------------------------------------------------- surrogates


def surrogate_checks(n_batches: int = 20) -> list[CheckResult]:
    w1 = w2 = w3 = w4 = 0.0
    for seed in range(n_batches):
        rng = np.random.default_rng(seed)
        B, L = 6, 5
        lengths = rng.integers(1, L + 1, size=B)
        mask = np.arange(L)[None, :] < lengths[:, None]
        old = -rng.random((B, L)) * mask
        new = (old + rng.normal(scale=0.3, size=(B, L))) * mask
        adv = rng.normal(size=B)
        ratio = obj.token_ratios(new, old, mask)
        g = obj.grpo_surrogate(ratio, adv, obj.SurrogateConfig.for_method("grpo", kl_coef=0.0), mask).item()
        d = obj.dapo_surrogate(ratio, adv, obj.SurrogateConfig.for_method("dapo", eps_high=0.2), mask).item()
        w1 = max(w1, abs(g - d))
        m1 = np.zeros((B, 1), dtype=bool) | True
        new1, old1 = new[:, :1], old[:, :1]
        r1 = obj.token_ratios(new1, old1, m1)
        g4 = obj.grpo_surrogate(r1, adv, obj.SurrogateConfig.for_method("grpo", eps_low=0.4, eps_high=0.4, kl_coef=0.0), m1).item()
        gm = obj.gmpo_surrogate(new1, old1, adv, obj.SurrogateConfig.for_method("gmpo"), m1).item()
        w2 = max(w2, abs(g4 - gm))
        s = obj.sequence_ratios(new1, old1, m1).data
        w3 = max(w3, float(np.max(np.abs(s - r1.data[:, 0]))))
        r = np.array([1.0, 0.0, 0.0, 1.0, 0.5, 0.25]) + rng.normal(size=B)
        a1 = obj.group_advantages(r).advantages
        a2 = obj.group_advantages(r + 3.7).advantages
        w4 = max(w4, float(np.max(np.abs(a1 - a2))), abs(a1.mean()), abs(a1.std() - 1.0))
    return [
        _result("surrogate: DAPO(0.2,0.2) == GRPO(0.2), beta=0", 1e-12, w1),
        _result("surrogate: GMPO == GRPO(0.4) on length 1", 1e-12, w2),
        _result("surrogate: GSPO ratio == token ratio on length 1", 1e-12, w3),
        _result("advantages: mean 0, std 1, shift invariant", 1e-6, w4),
        _result("kl: ref - new = ln 2", 1e-5, abs(obj.kl_estimate(np.zeros(1), np.log([2.0])).data[0] - 0.30685)),
    ]


# ---------------------------------------------------------------- hand trace


def hand_trace_setup(method: str = "grpo", seed: int = 3):
    """A fresh tiny run state plus one crafted 4-rollout group with rewards [1, 1, 0, 0]."""
    cfg = config_mod.from_dict({
        "method": {"method": method},
        "contrastive": {"tau": 0.5, "lam": 0.2, "d": 4, "head_warmup_steps": 0},
        "sampling": {"group_size": 4},
        "run": {"seed": seed, "d_model": 8, "n_layers": 1, "n_heads": 2, "max_len": 32, "total_steps": 1, "prompts_per_step": 1},
    })
    params = pm.init(cfg.run.dims(), seed)
    state = trainer.RunState.fresh(cfg, params)
    inst = generate(cfg.tasks.base_family(), seed)
    responses = [
        number_tokens(inst.answer) + [EOS],
        [ANS_OPEN] + number_tokens(inst.answer) + [ANS_CLOSE, EOS],
        [ANS_OPEN, ANS_CLOSE, EOS],
        [1, 2, 3, 4, EOS],
    ]
    recs = [RolloutRecord(len(inst.prompt_tokens), np.array(list(inst.prompt_tokens) + r), np.empty(0), np.empty(0)) for r in responses]
    lp, _, hidden = pm.score(params, recs)
    for i, r in enumerate(recs):
        r.response_logprobs = lp.data[i, : r.response_len].copy()
        r.hidden_states = hidden[i, : r.response_len].copy()
    rewards = [1, 1, 0, 0]
    for r, v in zip(recs, rewards):
        r.reward = v
    return cfg, state, RolloutGroup(inst, recs)


def hand_trace_expected(cfg, state, group) -> dict:
    """Independent plain-numpy evaluation of every intermediate of one step."""
    W = state.head.W.data
    tau, lam = cfg.contrastive.tau, cfg.contrastive.lam
    pooled = np.array([r.hidden_states.sum(axis=0) / r.response_len for r in group.rollouts])
    z = pooled @ W.T
    e = z / np.sqrt((z * z).sum(axis=1, keepdims=True))
    s = (e @ e.T) / tau
    base = np.array([r.reward for r in group.rollouts], dtype=float)
    rcl = np.zeros(4)
    losses = []
    for i, p in ((0, 1), (1, 0)):
        L = -(s[i, p] - math.log(sum(math.exp(v) for v in s[i])))
        losses.append(L)
        rcl[i] = max(-lam * L, cfg.contrastive.clip_floor)
    total = base + rcl
    mu = total.mean()
    sd = math.sqrt(((total - mu) ** 2).mean())
    adv = (total - mu) / sd
    n = np.array([r.response_len for r in group.rollouts], dtype=float)
    # on-policy: every ratio is 1 and the policy equals the reference, so KL is 0
    loss = -(adv * n).sum() / n.sum()
    return {"shaped": total, "contrastive": rcl, "advantages": adv, "policy_loss": loss, "anchor_losses": losses}


def hand_trace_check() -> list[CheckResult]:
    cfg, state, group = hand_trace_setup()
    want = hand_trace_expected(cfg, state, group)
    rec, trace = trainer.step_on_groups(state, cfg, [group], step=1)
    errs = {
        "shaped rewards": float(np.max(np.abs(trace.shaped[0].total - want["shaped"]))),
        "advantages": float(np.max(np.abs(trace.advantages[0].advantages - want["advantages"]))),
        "policy loss": abs(trace.policy_loss - want["policy_loss"]),
        "mean anchor loss": abs(rec.mean_contrastive_loss - float(np.mean(want["anchor_losses"]))),
    }
    return [_result(f"hand trace: {k}", 1e-9, v) for k, v in errs.items()]


def run_all(quick: bool = False) -> list[CheckResult]:
    results = []
    results += gradient_checks(n_seeds=2 if quick else 5)
    results += identity_checks()
    results += surrogate_checks()
    results += hand_trace_check()
    return results


def report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
