"""Acceptance experiments: one function per criterion, each returning a pass/fail verdict.

The cheap criteria run in seconds. The end-to-end comparison trains three
paired seeds for a few minutes each, so its per-seed results are cached on
disk under a key that covers the package source and the resolved config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import config as config_mod
from . import contrastive as cl
from . import objectives as obj
from . import selfcheck, trainer
from .autograd import Tensor

log = logging.getLogger(__name__)


@dataclass
class Verdict:
    number: int
    name: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number}: {self.name}: {self.detail}"


def _worst(results: list[selfcheck.CheckResult]) -> str:
    r = max(results, key=lambda c: c.measured / c.tolerance if c.tolerance > 0 else (math.inf if c.measured > 0 else 0.0))
    return f"worst {r.name} measured={r.measured:.2e} tol={r.tolerance:.0e}"


# ---------------------------------------------------------------- 1 to 6


def gradient_fidelity(n_seeds: int = 50) -> Verdict:
    """Tape gradients against central differences for every loss, over ``n_seeds`` seeds."""
    t0 = time.perf_counter()
    checks = selfcheck.gradient_checks(n_seeds=n_seeds)
    elapsed = time.perf_counter() - t0
    ok = all(c.passed for c in checks) and elapsed < 120.0
    return Verdict(1, "gradient fidelity", ok, f"{len(checks)} gradients x {n_seeds} seeds, {_worst(checks)}, {elapsed:.1f}s",
                   {"elapsed": elapsed, "worst": max(c.measured for c in checks)})


def loss_identities() -> Verdict:
    checks = selfcheck.identity_checks()
    hand = cl.infonce_anchor_loss(cl.similarity_matrix(selfcheck.HAND_E, 0.5), 0, 1).item()
    return Verdict(2, "closed-form loss identities", all(c.passed for c in checks),
                   f"{len(checks)} identities, hand InfoNCE={hand:.7f}, {_worst(checks)}", {"hand": hand})


def clip_behaviour(n_groups: int = 100_000, seed: int = 0) -> Verdict:
    """Floor binding at G=16 plus a fuzz of the reward bounds and the gate."""
    embs = np.tile(np.array([[1.0, 0.0]]), (16, 1))
    rs = cl.contrastive_rewards([1] * 8 + [0] * 8, embs, cl.ContrastiveConfig(lam=0.2), np.random.default_rng(seed))
    floor_ok = bool(np.all(rs.contrastive[:8] == -0.5))
    rng = np.random.default_rng(seed)
    configs = {k: cl.ContrastiveConfig(lam=0.2, loss_kind=k) for k in cl.LOSS_KINDS}
    bad = 0
    for _ in range(n_groups):
        G = int(rng.integers(2, 17))
        rewards = (rng.random(G) < rng.random()).astype(float)
        e = rng.normal(size=(G, 4))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        kind = cl.LOSS_KINDS[int(rng.integers(3))]
        c = cl.contrastive_rewards(rewards, e, configs[kind], rng).contrastive
        n_pos = int(rewards.sum())
        ok = np.all((c >= -0.5) & (c <= 0.0)) and np.all(c[rewards == 0] == 0.0)
        if n_pos <= 1 or n_pos == G:
            ok = ok and np.all(c == 0.0)
        bad += not ok
    return Verdict(3, "clip behaviour", floor_ok and bad == 0,
                   f"G=16 identical -> r^CL={rs.contrastive[0]:g}, {bad}/{n_groups} fuzzed groups out of contract", {"violations": bad})


def variant_equivalence(n_groups: int = 1000, seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_groups):
        G = int(rng.integers(3, 17))
        e = rng.normal(size=(G, 5))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        i, p = rng.choice(G, size=2, replace=False)
        sim = cl.similarity_matrix(e, float(rng.uniform(0.02, 1.0)))
        a = cl.infonce_anchor_loss(sim, int(i), int(p)).item()
        b = cl.supcon_anchor_loss(sim, int(i), [int(i), int(p)]).item()
        c = cl.softnn_anchor_loss(sim, int(i), [int(i), int(p)]).item()
        worst = max(worst, abs(a - b), abs(a - c))
    return Verdict(4, "single-partner variant equivalence", worst <= 1e-12, f"max gap {worst:.2e} over {n_groups} groups", {"worst": worst})


def surrogate_equivalence(n_batches: int = 1000, seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    grpo0 = obj.SurrogateConfig.for_method("grpo", kl_coef=0.0)
    grpo4 = obj.SurrogateConfig.for_method("grpo", eps_low=0.4, eps_high=0.4, kl_coef=0.0)
    dapo = obj.SurrogateConfig.for_method("dapo", eps_high=0.2)
    gmpo = obj.SurrogateConfig.for_method("gmpo")
    w_dapo = w_gmpo = w_gspo = 0.0
    for _ in range(n_batches):
        B, L = int(rng.integers(2, 9)), int(rng.integers(1, 7))
        lengths = rng.integers(1, L + 1, size=B)
        mask = np.arange(L)[None, :] < lengths[:, None]
        old = -rng.random((B, L)) * mask
        new = (old + rng.normal(scale=0.4, size=(B, L))) * mask
        adv = rng.normal(size=B)
        ratio = obj.token_ratios(new, old, mask)
        w_dapo = max(w_dapo, abs(obj.grpo_surrogate(ratio, adv, grpo0, mask).item() - obj.dapo_surrogate(ratio, adv, dapo, mask).item()))
        m1 = np.ones((B, 1), dtype=bool)
        r1 = obj.token_ratios(new[:, :1], old[:, :1], m1)
        g = obj.grpo_surrogate(r1, adv, grpo4, m1).item()
        w_gmpo = max(w_gmpo, abs(g - obj.gmpo_surrogate(new[:, :1], old[:, :1], adv, gmpo, m1).item()))
        s = obj.sequence_ratios(new[:, :1], old[:, :1], m1).data
        w_gspo = max(w_gspo, float(np.max(np.abs(s - r1.data[:, 0]))))
    worst = max(w_dapo, w_gmpo, w_gspo)
    return Verdict(5, "surrogate equivalences", worst <= 1e-12,
                   f"DAPO-GRPO {w_dapo:.1e}, GMPO-GRPO(0.4) {w_gmpo:.1e}, GSPO ratio {w_gspo:.1e} over {n_batches} batches",
                   {"dapo": w_dapo, "gmpo": w_gmpo, "gspo": w_gspo})


def advantage_contract(n_groups: int = 10_000, seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    mean_err = std_err = shift_err = 0.0
    zero_ok = True
    for _ in range(n_groups):
        G = int(rng.integers(2, 33))
        r = rng.integers(0, 2, size=G) + np.where(rng.random(G) < 0.5, rng.uniform(-0.5, 0.0, size=G), 0.0)
        if np.all(r == r[0]):
            zero_ok &= bool(np.all(obj.group_advantages(r).advantages == 0.0))
            continue
        a = obj.group_advantages(r).advantages
        b = obj.group_advantages(r + rng.normal(scale=5.0)).advantages
        mean_err = max(mean_err, abs(a.mean()))
        std_err = max(std_err, abs(a.std() - 1.0))
        shift_err = max(shift_err, float(np.max(np.abs(a - b))))
    for G in (2, 8, 16):
        zero_ok &= bool(np.all(obj.group_advantages(np.full(G, 0.7)).advantages == 0.0))
    ok = mean_err <= 1e-9 and std_err <= 1e-6 and shift_err <= 1e-12 and zero_ok
    return Verdict(6, "advantage contract", ok,
                   f"|mean| {mean_err:.1e}, |std-1| {std_err:.1e}, shift {shift_err:.1e}, all-equal groups zero: {zero_ok}",
                   {"mean": mean_err, "std": std_err, "shift": shift_err})


# ---------------------------------------------------------------- 7


def synthetic_pairs(rng: np.random.Generator, n: int, dim: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """``v = rho * u + sqrt(1 - rho^2) * noise`` with standard normal ``u`` and noise."""
    u = rng.normal(size=(n, dim))
    v = rho * u + math.sqrt(1.0 - rho * rho) * rng.normal(size=(n, dim))
    return u, v


def train_pair_head(rho: float, seed: int = 0, steps: int = 300, batch: int = 32, dim: int = 8, d: int = 8,
                    tau: float = 0.2, lr: float = 1e-2, eval_batches: int = 50) -> dict:
    """Fit a shared linear head with paired InfoNCE and report the held-out bound ``ln N - L``."""
    head = cl.ContrastiveHead.init(dim, d, seed=seed, lr=lr, weight_decay=0.0)
    rng = np.random.default_rng([seed, int(round(rho * 1000))])
    for _ in range(steps):
        u, v = synthetic_pairs(rng, batch, dim, rho)
        head.W.grad = None
        with ag.Tape() as tape:
            loss = cl.paired_infonce_loss(cl.embed(head, Tensor(u)), cl.embed(head, Tensor(v)), tau)
        tape.backward(loss)
        ag.adamw_step([head.W], head.adamw)
    held = np.random.default_rng([seed, 999_999])
    losses = []
    for _ in range(eval_batches):
        u, v = synthetic_pairs(held, batch, dim, rho)
        losses.append(cl.paired_infonce_loss(cl.embed(head, u), cl.embed(head, v), tau).item())
    mean_loss = float(np.mean(losses))
    bounds = [cl.mi_lower_bound(x, batch) for x in losses]
    return {"rho": rho, "loss": mean_loss, "bound": cl.mi_lower_bound(mean_loss, batch), "max_bound": max(bounds), "ln_n": math.log(batch)}


def mi_sanity(rhos=(0.0, 0.5, 0.9), seed: int = 0) -> Verdict:
    res = [train_pair_head(r, seed=seed) for r in rhos]
    b = [x["bound"] for x in res]
    monotone = all(b[k + 1] >= b[k] for k in range(len(b) - 1))
    strict = b[-1] > b[0]
    capped = all(x["max_bound"] <= x["ln_n"] + 1e-9 for x in res)
    detail = ", ".join(f"rho={x['rho']:g}: {x['bound']:.3f}" for x in res) + f" (ln N = {res[0]['ln_n']:.3f})"
    return Verdict(7, "MI estimator sanity", monotone and strict and capped, detail, {"bounds": b})


# ---------------------------------------------------------------- 8


E2E_SEEDS = (0, 1, 2)
_TRAINING_MODULES = ("autograd", "checkpoint", "config", "contrastive", "errors", "objectives", "policy", "tasks", "trainer")


def e2e_config(seed: int, contrastive: bool) -> config_mod.TrainConfig:
    return config_mod.from_dict({"run": {"seed": seed}, "contrastive": {"contrastive_enabled": contrastive}})


def source_digest() -> str:
    """Hash of the modules a training run executes; any change there invalidates cached runs."""
    h = hashlib.sha256()
    for name in _TRAINING_MODULES:
        path = Path(__file__).parent / f"{name}.py"
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _window_mean(records: list[dict], key: str, steps) -> float:
    vals = [r[key] for r in records if r["step"] in steps and r[key] is not None]
    return float(np.mean(vals)) if vals else float("nan")


def e2e_seed(seed: int, cache_dir: Path | None = None, fresh: bool = False) -> dict:
    """Pretrain once, then train GRPO and GRPO+CLIPO from the same warm start."""
    base_cfg, clipo_cfg = e2e_config(seed, False), e2e_config(seed, True)
    key = hashlib.sha256((source_digest() + base_cfg.to_toml() + clipo_cfg.to_toml()).encode()).hexdigest()[:20]
    path = Path(cache_dir) / f"e2e_seed{seed}_{key}.json" if cache_dir is not None else None
    if path is not None and path.exists() and not fresh:
        return json.loads(path.read_text())
    t0 = time.perf_counter()
    params, _ = trainer.pretrain(base_cfg)
    pre_time = time.perf_counter() - t0
    out = {"seed": seed, "key": key, "pretrain_seconds": pre_time}
    for name, cfg in (("grpo", base_cfg), ("clipo", clipo_cfg)):
        t0 = time.perf_counter()
        _, records = trainer.run(cfg, None, params=params.copy())
        out[name] = [json.loads(r.to_json()) for r in records]
        out[f"{name}_seconds"] = time.perf_counter() - t0
        log.info("seed %d %s finished in %.0fs", seed, name, out[f"{name}_seconds"])
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(out))
    return out


def summarize_seed(res: dict, warmup_steps: int = 20, window: int = 10) -> dict:
    g, c = res["grpo"], res["clipo"]
    last = max(r["step"] for r in c)
    start = range(max(1, warmup_steps - window + 1), warmup_steps + 1)
    end = range(last - window + 1, last + 1)
    return {
        "seed": res["seed"],
        "base_start": g[0]["pass1_eval_base"],
        "grpo_gain": g[-1]["pass1_eval_base"] - g[0]["pass1_eval_base"],
        "grpo_perturbed": g[-1]["pass1_eval_perturbed"],
        "clipo_perturbed": c[-1]["pass1_eval_perturbed"],
        "perturbed_gap": c[-1]["pass1_eval_perturbed"] - g[-1]["pass1_eval_perturbed"],
        "cos_warmup_end": _window_mean(c, "mean_pos_pair_cosine", start),
        "cos_final": _window_mean(c, "mean_pos_pair_cosine", end),
        "cos_rise": _window_mean(c, "mean_pos_pair_cosine", end) - _window_mean(c, "mean_pos_pair_cosine", start),
        "run_seconds": max(res["grpo_seconds"], res["clipo_seconds"]),
    }


def end_to_end(cache_dir: Path | None = None, fresh: bool = False, seeds=E2E_SEEDS) -> tuple[Verdict, Verdict]:
    """Criterion 8 split into its GRPO part (a) and its CLIPO part (b)."""
    rows = [summarize_seed(e2e_seed(s, cache_dir, fresh)) for s in seeds]
    med = {k: statistics.median(r[k] for r in rows) for k in ("grpo_gain", "perturbed_gap", "cos_rise", "base_start")}
    warm_ok = all(0.3 <= r["base_start"] <= 0.7 for r in rows)
    time_ok = all(r["run_seconds"] <= 1800 for r in rows)
    a_ok = warm_ok and time_ok and med["grpo_gain"] >= 0.10
    gap_ok = med["perturbed_gap"] >= -0.01
    cos_ok = med["cos_rise"] >= 0.10
    per_seed = "; ".join(f"seed {r['seed']}: start {r['base_start']:.3f} gain {r['grpo_gain']:+.3f}" for r in rows)
    va = Verdict(8, "(a) GRPO base pass@1 gain", a_ok, f"median gain {med['grpo_gain']:+.3f} (need >= +0.100); {per_seed}", {"rows": rows, "median": med})
    per_seed_b = "; ".join(f"seed {r['seed']}: gap {r['perturbed_gap']:+.3f} cos {r['cos_warmup_end']:.3f}->{r['cos_final']:.3f}" for r in rows)
    vb = Verdict(8, "(b) GRPO+CLIPO perturbed pass@1 and positive-pair cosine", gap_ok and cos_ok,
                 f"median perturbed gap {med['perturbed_gap']:+.3f} (need >= -0.010, {'ok' if gap_ok else 'miss'}), "
                 f"median cosine rise {med['cos_rise']:+.3f} (need >= +0.100, {'ok' if cos_ok else 'miss'}); {per_seed_b}",
                 {"rows": rows, "median": med, "gap_ok": gap_ok, "cos_ok": cos_ok})
    return va, vb


# ---------------------------------------------------------------- 9 and 10


def small_run_config(**sections) -> config_mod.TrainConfig:
    base = {
        "run": {"total_steps": 8, "prompts_per_step": 3, "checkpoint_every": 4, "pretrain_steps": 60},
        "sampling": {"group_size": 8},
        "tasks": {"n_train": 200, "n_eval": 6},
        "eval": {"eval_every": 4, "eval_samples_per_prompt": 4},
        "contrastive": {"head_warmup_steps": 2},
    }
    for sec, vals in sections.items():
        base.setdefault(sec, {}).update(vals)
    return config_mod.from_dict(base)


def ablation_contracts(workdir: Path, params=None) -> Verdict:
    workdir = Path(workdir)
    cfg = small_run_config()
    if params is None:
        params, _ = trainer.pretrain(cfg)
    plain = small_run_config(contrastive={"contrastive_enabled": False})
    # the baseline has shaping off; a disabled run with every other contrastive knob changed must match it
    knobs = small_run_config(contrastive={"contrastive_enabled": False, "tau": 0.5, "lam": 1.0, "loss_kind": "softnn", "d": 7, "head_lr": 0.1})
    sa, _ = trainer.run(plain, workdir / "baseline", params=params.copy())
    sb, rb = trainer.run(knobs, workdir / "disabled", params=params.copy())
    same = ((workdir / "baseline" / "metrics.jsonl").read_bytes() == (workdir / "disabled" / "metrics.jsonl").read_bytes()
            and sa.params.hash() == sb.params.hash())
    inert = all(r.mean_contrastive_loss is None and r.mean_shaped_reward == r.mean_base_reward for r in rb[1:])
    fixed = small_run_config(contrastive={"fixed_head": True})
    before = trainer.RunState.fresh(fixed, params.copy()).head.hash()
    sf, rf = trainer.run(fixed, workdir / "fixed", params=params.copy())
    head_const = sf.head.hash() == before
    emits = any(r.frac_valid_groups and r.mean_shaped_reward < r.mean_base_reward for r in rf[1:])
    ok = same and inert and head_const and emits
    return Verdict(9, "ablation contracts", ok,
                   f"disabled == baseline bytes: {same}, shaping inert: {inert}, fixed head constant: {head_const}, fixed head rewards: {emits}")


def determinism(workdir: Path, params=None) -> Verdict:
    workdir = Path(workdir)
    cfg = small_run_config()
    if params is None:
        params, _ = trainer.pretrain(cfg)
    for name in ("a", "b"):
        trainer.run(cfg, workdir / name, params=params.copy())
    files = ("metrics.jsonl", "eval.jsonl", "final.ckpt")
    same = {f: (workdir / "a" / f).read_bytes() == (workdir / "b" / f).read_bytes() for f in files}
    return Verdict(10, "determinism", all(same.values()), ", ".join(f"{f} identical: {v}" for f, v in same.items()))


def fresh_requested() -> bool:
    return os.environ.get("CLIPO_E2E_FRESH", "") not in ("", "0")
