"""
A short run, end to end: pretrain a tiny policy, then train it with GRPO plus contrastive shaping.

The full default run takes a few minutes; this one is cut down so it finishes
in well under a minute on one core. Metrics go to a temporary run directory and the
interesting columns are printed as they come.
"""

import tempfile
from pathlib import Path

from clipo import config, trainer

cfg = config.from_dict({
    "run": {"seed": 0, "total_steps": 30, "prompts_per_step": 4, "pretrain_steps": 120, "checkpoint_every": 30},
    "sampling": {"group_size": 8},
    "tasks": {"n_eval": 16},
    "eval": {"eval_every": 15, "eval_samples_per_prompt": 4},
    "contrastive": {"head_warmup_steps": 5},
})

# === SUPERVISED WARM START ===

params, losses = trainer.pretrain(cfg)
print(f"pretrain: {len(losses)} steps, loss {losses[0]:.3f} -> {losses[-1]:.3f}")

# === RL PHASE ===

# The first head_warmup_steps steps train only the contrastive head; the policy
# starts moving afterwards.
out = Path(tempfile.mkdtemp(prefix="clipo-demo-"))
state, records = trainer.run(cfg, out, params=params)

print("\nstep  reward  shaped  anchor-loss  pos-cos  neg-cos  pass@1 base/perturbed")
fmt = lambda v, w=7: f"{v:{w}.3f}" if v is not None else " " * (w - 1) + "-"
for r in records:
    evals = f"{r.pass1_eval_base:.3f}/{r.pass1_eval_perturbed:.3f}" if r.pass1_eval_base is not None else ""
    print(f"{r.step:4d} {fmt(r.mean_base_reward)} {fmt(r.mean_shaped_reward)} {fmt(r.mean_contrastive_loss, 12)} "
          f"{fmt(r.mean_pos_pair_cosine, 8)} {fmt(r.mean_pos_neg_cosine, 8)}  {evals}")

print(f"\nrun directory: {out}")
print("files:", sorted(p.name for p in out.iterdir()))
