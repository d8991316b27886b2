"""The RLVR loop with contrastive reward shaping.

One training step samples a group per prompt, verifies it, embeds every
rollout with the contrastive head, shapes the rewards of valid groups,
normalizes advantages within each group, takes one policy step on the chosen
surrogate and finally one head step on the anchor losses it just rewarded.

All randomness is drawn from streams derived from ``(seed, step, purpose)``,
so a resumed run continues exactly where an uninterrupted one would be, and a
disabled contrastive branch never touches a stream the baseline uses.
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from . import config as config_mod
from . import contrastive as cl
from . import objectives as obj
from . import policy as pm
from .autograd import AdamWState, Tensor
from .config import TrainConfig
from .errors import CheckpointError, ContractError, NumericFailure
from .policy import PolicyParams, RolloutGroup, SamplingConfig
from .tasks import TaskInstance, make_eval_suites, make_split, solution_tokens, vocab_hash

log = logging.getLogger(__name__)

_PURPOSES = {"batch": 1, "rollout": 2, "positive": 3, "eval": 4, "head_init": 5, "policy_init": 6, "pretrain": 7, "export": 8}


def derive_rng(seed: int, purpose: str, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_PURPOSES[purpose], *key)))


def derive_seed(seed: int, purpose: str, *key: int) -> int:
    return int(derive_rng(seed, purpose, *key).integers(2**31 - 1))


# ---------------------------------------------------------------- records


METRIC_FIELDS = (
    "step",
    "mean_base_reward",
    "mean_shaped_reward",
    "pass1_eval_base",
    "pass1_eval_perturbed",
    "mean_contrastive_loss",
    "mi_lower_bound",
    "mean_pos_pair_cosine",
    "mean_pos_neg_cosine",
    "frac_valid_groups",
    "frac_clipped_rewards",
    "kl_to_ref",
    "dropped_groups",
)


@dataclass
class MetricsRecord:
    """One line of the metrics stream. ``None`` marks a quantity not measured at this step."""

    step: int
    mean_base_reward: float | None = None
    mean_shaped_reward: float | None = None
    pass1_eval_base: float | None = None
    pass1_eval_perturbed: float | None = None
    mean_contrastive_loss: float | None = None
    mi_lower_bound: float | None = None
    mean_pos_pair_cosine: float | None = None
    mean_pos_neg_cosine: float | None = None
    frac_valid_groups: float | None = None
    frac_clipped_rewards: float | None = None
    kl_to_ref: float | None = None
    dropped_groups: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(", ", ": "))

    def non_finite(self) -> list[str]:
        bad = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not math.isfinite(v):
                bad.append(f.name)
        return bad


@dataclass
class RunState:
    params: PolicyParams
    ref_params: PolicyParams
    head: cl.ContrastiveHead
    policy_opt: AdamWState
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig, params: PolicyParams) -> "RunState":
        con = cfg.contrastive
        head = cl.ContrastiveHead.init(
            params.dims.d_model,
            con.d,
            seed=derive_seed(cfg.run.seed, "head_init"),
            lr=con.head_lr,
            weight_decay=con.head_weight_decay,
            frozen=con.fixed_head,
        )
        opt = AdamWState.for_params(params.list(), learning_rate=cfg.run.policy_lr, weight_decay=cfg.run.policy_weight_decay)
        return cls(params, params.copy(), head, opt)


@dataclass
class StepTrace:
    """Every intermediate of one step, for inspection and hand-traced tests."""

    groups: list[RolloutGroup]
    shaped: list[cl.ShapedRewardSet]
    kept: list[int]
    advantages: list[obj.AdvantageSet]
    policy_loss: float | None = None
    head_updated: bool = False
    embeddings: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------- tasks


def build_tasks(cfg: TrainConfig) -> tuple[list[TaskInstance], dict[str, list[TaskInstance]]]:
    """Training prompts and the three evaluation suites, all prompt-disjoint from training."""
    t = cfg.tasks
    base = t.base_family()
    train, _ = make_split(base, t.n_train, 0, t.task_seed)
    suites = make_eval_suites(
        base,
        t.n_eval,
        t.task_seed,
        exclude=[i.prompt_tokens for i in train],
        perturbed_operand_max=t.perturbed_operand_max,
        distractors=t.distractor_clauses,
    )
    return train, suites


def pretrain_corpus(instances: Sequence[TaskInstance], seed: int) -> list[tuple[tuple, list[int]]]:
    rng = random.Random(seed)
    return [(inst.prompt_tokens, solution_tokens(inst, rng)) for inst in instances]


def pretrain(cfg: TrainConfig, train: Sequence[TaskInstance] | None = None, steps: int | None = None) -> tuple[PolicyParams, list[float]]:
    """Fresh policy warmed up by supervised cross-entropy on gold scratchpads."""
    if train is None:
        train, _ = build_tasks(cfg)
    run = cfg.run
    params = pm.init(run.dims(), seed=derive_seed(run.seed, "policy_init"))
    corpus = pretrain_corpus(train, derive_seed(run.seed, "pretrain", 0))
    losses = pm.supervised_pretrain(
        params,
        corpus,
        run.pretrain_steps if steps is None else steps,
        lr=run.pretrain_lr,
        batch_size=run.pretrain_batch_size,
        seed=derive_seed(run.seed, "pretrain", 1),
    )
    return params, losses


# ---------------------------------------------------------------- evaluation


def evaluate(
    params: PolicyParams,
    suites: dict[str, Sequence[TaskInstance]],
    sampling: SamplingConfig,
    seed: int,
    chunk: int = 16,
    sample_fn=None,
) -> dict[str, float]:
    """pass@1 per suite: mean over prompts of the fraction of ``group_size`` samples verified correct.

    Streams depend only on ``(seed, suite, prompt)``, so every evaluation of a
    run uses the same random numbers and differences reflect the policy alone.
    """
    sample_fn = sample_fn or pm.sample_groups
    out = {}
    for name, instances in suites.items():
        s_idx = zlib.crc32(name.encode())
        if not instances:
            out[name] = float("nan")
            continue
        per_prompt = []
        for start in range(0, len(instances), chunk):
            batch = list(instances[start : start + chunk])
            rngs = [derive_rng(seed, "eval", s_idx, start + k) for k in range(len(batch))]
            groups = sample_fn(params, batch, sampling, rngs, score_outputs=False)
            per_prompt += [float(g.rewards.mean()) for g in groups]
        out[name] = float(np.mean(per_prompt))
    return out


def eval_summary(scores: dict[str, float]) -> tuple[float, float]:
    perturbed = [v for k, v in scores.items() if k.startswith("perturbed")]
    return scores["base"], float(np.mean(perturbed))


# ---------------------------------------------------------------- one step


def _pooled(group: RolloutGroup) -> np.ndarray:
    return np.stack([r.hidden_states.mean(axis=0) for r in group.rollouts])


def _contrastive_pass(state: RunState, cfg: TrainConfig, groups: Sequence[RolloutGroup], step: int, emit: bool):
    """Embed every group, shape rewards of valid groups, collect anchor losses on a head tape."""
    ccfg = cfg.contrastive.core()
    tape = ag.Tape()
    shaped, losses, embs_np = [], [], []
    with tape:
        for k, g in enumerate(groups):
            embs = cl.embed(state.head, Tensor(_pooled(g)))
            embs_np.append(embs.data.copy())
            rs = cl.contrastive_rewards(g, embs, ccfg, derive_rng(cfg.run.seed, "positive", step, k))
            losses += rs.anchor_losses
            if not emit:
                rs = cl.ShapedRewardSet(rs.base, np.zeros_like(rs.base), rs.base.copy(), rs.group_valid, rs.clipped_mask, rs.anchor_losses, rs.anchor_index)
            shaped.append(rs)
    return shaped, losses, embs_np, tape


def _policy_loss(state: RunState, cfg: TrainConfig, groups, kept, advantages, step: int, ref_grid):
    sur = cfg.method.surrogate()
    rollouts = [r for k in kept for r in groups[k].rollouts]
    adv = np.concatenate([advantages[k].advantages for k in kept])
    old, mask = pm.stored_logprobs(rollouts)
    rows = np.concatenate([np.arange(k * len(groups[0]), (k + 1) * len(groups[0])) for k in kept])
    ref = ref_grid[rows][:, : mask.shape[1]]
    want_hidden = cfg.contrastive.contrastive_enabled and cfg.contrastive.backprop_into_policy
    new, mask2, hidden = pm.score(state.params, rollouts, keep_hidden_graph=want_hidden)
    kl = obj.kl_estimate(new, ref, mask) if sur.kl_coef > 0 else None
    loss = obj.surrogate_loss(sur, new, old, adv, mask, kl)
    if want_hidden:
        extra = _policy_contrastive_term(state, cfg, groups, kept, hidden, mask, step)
        if extra is not None:
            loss = loss + extra
    return loss


def _policy_contrastive_term(state, cfg, groups, kept, hidden, mask, step):
    """Optional second path: anchor losses back-propagated into the policy (head weights held fixed)."""
    ccfg = cfg.contrastive.core()
    W = state.head.W.data
    m = np.asarray(mask, dtype=np.float64)
    pooled = ag.sum_(hidden * m[..., None], axis=1) * (1.0 / m.sum(axis=1))[:, None]
    G = len(groups[0])
    terms = []
    for j, k in enumerate(kept):
        g = groups[k]
        if not cl.group_gate(g):
            continue
        rows = ag.index(pooled, np.arange(j * G, (j + 1) * G))
        embs = ag.l2_normalize(ag.matmul(rows, W.T))
        rs = cl.contrastive_rewards(g, embs, ccfg, derive_rng(cfg.run.seed, "positive", step, k))
        terms += rs.anchor_losses
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (ccfg.lam / len(terms))


def step_on_groups(state: RunState, cfg: TrainConfig, groups: Sequence[RolloutGroup], step: int, warmup: bool = False) -> tuple[MetricsRecord, StepTrace]:
    """Everything after sampling: shaping, advantages, policy update, head update, metrics."""
    groups = list(groups)
    con = cfg.contrastive
    sur = cfg.method.surrogate()
    G = len(groups[0])
    rec = MetricsRecord(step=step)
    base_all = np.concatenate([g.rewards for g in groups])
    rec.mean_base_reward = float(base_all.mean())

    losses, tape, embs_np = [], None, []
    if con.contrastive_enabled:
        shaped, losses, embs_np, tape = _contrastive_pass(state, cfg, groups, step, emit=not warmup)
    else:
        shaped = [cl.ShapedRewardSet.unshaped(g.rewards) for g in groups]
    rec.mean_shaped_reward = float(np.concatenate([s.total for s in shaped]).mean())

    if sur.dynamic_sampling:
        kept_groups, dropped = obj.dynamic_sampling_filter(groups)
        kept_ids = {id(g) for g in kept_groups}
        kept = [k for k, g in enumerate(groups) if id(g) in kept_ids]
    else:
        kept, dropped = list(range(len(groups))), 0
    rec.dropped_groups = int(dropped)
    advantages = [obj.group_advantages(s, sur.std_guard) for s in shaped]

    # KL to the frozen reference, measured on every sampled token
    rollouts = [r for g in groups for r in g.rollouts]
    cur, mask = pm.stored_logprobs(rollouts)
    ref_grid = pm.score(state.ref_params, rollouts)[0].data
    kl_tok = obj.kl_estimate(cur, ref_grid, mask).data
    rec.kl_to_ref = float((kl_tok * mask).sum() / mask.sum())

    trace = StepTrace(groups, shaped, kept, advantages, embeddings=embs_np)
    update_policy = not warmup or con.warmup_updates_policy
    if update_policy and kept:
        ag.zero_grads(state.params.list())
        with ag.Tape() as ptape:
            loss = _policy_loss(state, cfg, groups, kept, advantages, step, ref_grid)
        if not math.isfinite(loss.item()):
            raise NumericFailure(f"step {step}: policy loss is {loss.item()}")
        ptape.backward(loss)
        for p in state.params.list():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        ag.adamw_step(state.params.list(), state.policy_opt)
        trace.policy_loss = loss.item()
    elif update_policy:
        log.info("step %d: every group was filtered out; policy update skipped", step)

    if con.contrastive_enabled:
        valid = [s for s in shaped if s.group_valid]
        rec.frac_valid_groups = len(valid) / len(groups)
        anchor_vals = [l.item() for l in losses]
        if anchor_vals:
            mean_loss = float(np.mean(anchor_vals))
            rec.mean_contrastive_loss = mean_loss
            rec.mi_lower_bound = cl.mi_lower_bound(mean_loss, G)
            rec.frac_clipped_rewards = float(np.mean(np.concatenate([s.clipped_mask[s.anchor_index] for s in valid])))
        pp, pn = [], []
        for g, e in zip(groups, embs_np):
            a, b = cl.pair_cosines(e, g.rewards)
            if a is not None:
                pp.append(a)
            if b is not None:
                pn.append(b)
        rec.mean_pos_pair_cosine = float(np.mean(pp)) if pp else None
        rec.mean_pos_neg_cosine = float(np.mean(pn)) if pn else None
        trace.head_updated = cl.head_update(state.head, losses, tape)
    state.step = step
    return rec, trace


def sample_step_groups(state: RunState, cfg: TrainConfig, train: Sequence[TaskInstance], step: int) -> list[RolloutGroup]:
    idx = derive_rng(cfg.run.seed, "batch", step).choice(len(train), size=cfg.run.prompts_per_step, replace=False)
    batch = [train[i] for i in idx]
    rngs = [derive_rng(cfg.run.seed, "rollout", step, k) for k in range(len(batch))]
    return pm.sample_groups(state.params, batch, cfg.sampling, rngs)


def train_step(state: RunState, cfg: TrainConfig, train: Sequence[TaskInstance], step: int | None = None) -> tuple[MetricsRecord, StepTrace]:
    step = state.step + 1 if step is None else step
    groups = sample_step_groups(state, cfg, train, step)
    return step_on_groups(state, cfg, groups, step, warmup=in_warmup(cfg, step))


def in_warmup(cfg: TrainConfig, step: int) -> bool:
    con = cfg.contrastive
    return con.contrastive_enabled and step <= con.head_warmup_steps


def warmup_head(state: RunState, cfg: TrainConfig, train: Sequence[TaskInstance]) -> list[MetricsRecord]:
    """Head-only steps ``1..head_warmup_steps``; contrastive rewards are computed but not emitted."""
    out = []
    while in_warmup(cfg, state.step + 1):
        rec, _ = train_step(state, cfg, train)
        out.append(rec)
    return out


# ---------------------------------------------------------------- checkpoints


def save_state(path, state: RunState, cfg: TrainConfig) -> None:
    arrays = {}
    for k, v in state.params.arrays().items():
        arrays[f"policy/{k}"] = v
    for k, v in state.ref_params.arrays().items():
        arrays[f"ref/{k}"] = v
    arrays["head/W"] = state.head.W.data
    names = state.params.names()
    for name, m, v in zip(names, state.policy_opt.m, state.policy_opt.v):
        arrays[f"opt/m/{name}"] = m
        arrays[f"opt/v/{name}"] = v
    arrays["head_opt/m"] = state.head.adamw.m[0]
    arrays["head_opt/v"] = state.head.adamw.v[0]
    header = {
        "kind": "run",
        "dims": asdict(state.params.dims),
        "vocab_hash": vocab_hash(),
        "step": state.step,
        "rng_state": {"seed": cfg.run.seed, "next_step": state.step + 1},
        "policy_opt_step": state.policy_opt.step,
        "head_opt_step": state.head.adamw.step,
        "config": cfg.to_dict(),
    }
    checkpoint.save(path, header, arrays)


def load_state(path, cfg: TrainConfig | None = None) -> tuple[RunState, TrainConfig]:
    header, arrays = checkpoint.load(path)
    if header.get("kind") != "run":
        raise CheckpointError(f"{path}: field 'kind' is {header.get('kind')!r}, expected 'run'")
    if cfg is None:
        cfg = config_mod.from_dict(header["config"])
    params = pm.params_from_checkpoint(header, arrays, "policy/")
    ref = pm.params_from_checkpoint(header, arrays, "ref/")
    state = RunState.fresh(cfg, params)
    state.ref_params = ref
    state.head.W.data = arrays["head/W"].copy()
    state.head.adamw.m = [arrays["head_opt/m"].copy()]
    state.head.adamw.v = [arrays["head_opt/v"].copy()]
    state.head.adamw.step = int(header["head_opt_step"])
    names = params.names()
    try:
        state.policy_opt.m = [arrays[f"opt/m/{n}"].copy() for n in names]
        state.policy_opt.v = [arrays[f"opt/v/{n}"].copy() for n in names]
    except KeyError as exc:
        raise CheckpointError(f"{path}: optimizer array {exc} missing") from None
    state.policy_opt.step = int(header["policy_opt_step"])
    state.step = int(header["step"])
    return state, cfg


# ---------------------------------------------------------------- driver


def _dump_failure(out_dir: Path | None, rec: MetricsRecord, trace: StepTrace | None, bad: list[str]) -> str:
    info = {"step": rec.step, "non_finite": bad, "metrics": asdict(rec)}
    if trace is not None:
        info["rewards"] = [g.rewards.tolist() for g in trace.groups]
        info["shaped"] = [s.total.tolist() for s in trace.shaped]
        info["policy_loss"] = trace.policy_loss
    if out_dir is None:
        return json.dumps(info)
    path = out_dir / f"failure_step{rec.step}.json"
    path.write_text(json.dumps(info, indent=2, default=str))
    return str(path)


def run(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    params: PolicyParams | None = None,
    resume_from: str | Path | None = None,
    stop_at: int | None = None,
) -> tuple[RunState, list[MetricsRecord]]:
    """Full loop: (pretrain|load) -> snapshot reference -> head warmup -> RL steps with periodic eval.

    Writes ``config.toml``, ``metrics.jsonl``, ``eval.jsonl`` and checkpoints
    into ``out_dir`` when given. ``stop_at`` ends the loop early (used to test
    resumption) without writing the final checkpoint.
    """
    out = Path(out_dir) if out_dir is not None else None
    train, suites = build_tasks(cfg)
    eval_sampling = cfg.eval.sampling(cfg.sampling.max_response_len)
    records: list[MetricsRecord] = []

    if resume_from is not None:
        state, _ = load_state(resume_from, cfg)
    else:
        if params is None:
            params, _ = pretrain(cfg, train)
        state = RunState.fresh(cfg, params)

    metrics_fh = eval_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config_mod.echo(cfg, out / "config.toml")
        mpath, epath = out / "metrics.jsonl", out / "eval.jsonl"
        if resume_from is not None:
            _truncate_stream(mpath, state.step)
            _truncate_stream(epath, state.step)
        else:
            mpath.write_text("")
            epath.write_text("")
        metrics_fh, eval_fh = open(mpath, "a"), open(epath, "a")

    def emit(rec: MetricsRecord, trace=None, scores=None):
        bad = rec.non_finite()
        if bad:
            where = _dump_failure(out, rec, trace, bad)
            raise NumericFailure(f"step {rec.step}: non-finite {', '.join(bad)} (dump: {where})")
        records.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(rec.to_json() + "\n")
            metrics_fh.flush()
            if scores is not None:
                eval_fh.write(json.dumps({"step": rec.step, "seed": cfg.run.seed, "n": cfg.eval.eval_samples_per_prompt,
                                          "prompts": {k: len(v) for k, v in suites.items()}, "pass1": scores}) + "\n")
                eval_fh.flush()

    def do_eval(rec: MetricsRecord):
        scores = evaluate(state.params, suites, eval_sampling, cfg.run.seed)
        rec.pass1_eval_base, rec.pass1_eval_perturbed = eval_summary(scores)
        return scores

    try:
        if state.step == 0:
            rec = MetricsRecord(step=0)
            emit(rec, scores=do_eval(rec))
        last = cfg.run.total_steps if stop_at is None else min(stop_at, cfg.run.total_steps)
        while state.step < last:
            t0 = time.perf_counter()
            step = state.step + 1
            try:
                rec, trace = train_step(state, cfg, train, step)
            except NumericFailure as exc:
                rec = MetricsRecord(step=step)
                where = _dump_failure(out, rec, None, [str(exc)])
                raise NumericFailure(f"{exc} (dump: {where})") from None
            if not all(np.isfinite(p.data).all() for p in state.params.list()):
                where = _dump_failure(out, rec, trace, ["policy parameters"])
                raise NumericFailure(f"step {step}: non-finite policy parameters (dump: {where})")
            scores = None
            if step % cfg.eval.eval_every == 0 or step == cfg.run.total_steps:
                scores = do_eval(rec)
            emit(rec, trace, scores)
            log.info("step %d  reward %.3f  %.2fs", step, rec.mean_base_reward, time.perf_counter() - t0)
            if out is not None and step % cfg.run.checkpoint_every == 0:
                save_state(out / f"step{step:05d}.ckpt", state, cfg)
        if out is not None and stop_at is None:
            save_state(out / "final.ckpt", state, cfg)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            eval_fh.close()
    return state, records


def _truncate_stream(path: Path, last_step: int) -> None:
    if not path.exists():
        path.write_text("")
        return
    keep = [line for line in path.read_text().splitlines() if line.strip() and json.loads(line)["step"] <= last_step]
    path.write_text("".join(line + "\n" for line in keep))


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
