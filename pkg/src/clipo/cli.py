"""Command-line driver: ``clipo pretrain | train | eval | export-embeddings | selfcheck``.

Exit codes: 0 success, 1 other failure (missing checkpoint, I/O), 2 config
error, 3 numeric failure, 4 selfcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import contrastive as cl
from . import policy as pm
from . import selfcheck, trainer
from .errors import CheckpointError, ClipoError, ConfigError, NumericFailure

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SELFCHECK = 0, 1, 2, 3, 4
SUITES = ("base", "perturbed1", "perturbed2")

log = logging.getLogger("clipo")


def _pin_threads() -> None:
    """Single worker everywhere, including inside BLAS."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def _load_cfg(args, header: dict | None = None) -> config_mod.TrainConfig:
    """Config file (or, failing that, the config stored in a run checkpoint) plus overrides."""
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.config is None and header and "config" in header:
        return config_mod.from_dict(config_mod.apply_overrides(header["config"], overrides))
    return config_mod.load(args.config, overrides)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ClipoError(f"output directory {out} is not writable: {exc}") from None
    return out


def _load_params(path) -> tuple[pm.PolicyParams, dict]:
    if path is None:
        raise CheckpointError("--ckpt is required")
    return pm.load_policy(path)


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg = config_mod.from_dict(config_mod.apply_overrides(cfg.to_dict(), [f"run.pretrain_steps={args.steps}"]))
    out = _out_dir(args.out)
    config_mod.echo(cfg, out / "config.toml")
    train, suites = trainer.build_tasks(cfg)
    params, losses = trainer.pretrain(cfg, train)
    pm.save_policy(out / "policy.ckpt", params, step=0, rng_state={"seed": cfg.run.seed})
    scores = trainer.evaluate(params, suites, cfg.eval.sampling(cfg.sampling.max_response_len), cfg.run.seed)
    greedy = _greedy_pass1(params, suites["base"], cfg)
    report = {
        "steps": cfg.run.pretrain_steps,
        "seed": cfg.run.seed,
        "first_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "pass1": scores,
        "greedy_pass1_base": greedy,
        "n": cfg.eval.eval_samples_per_prompt,
        "prompts": {k: len(v) for k, v in suites.items()},
    }
    (out / "pretrain_report.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / "pretrain_losses.json").write_text(json.dumps(losses) + "\n")
    print(_table(scores, cfg))
    print(f"greedy pass@1 (base): {greedy:.4f}")
    return EXIT_OK


def _greedy_pass1(params, instances, cfg) -> float:
    samp = pm.SamplingConfig(max_response_len=cfg.sampling.max_response_len, group_size=2)
    recs = pm.generate(params, [i.prompt_tokens for i in instances], samp, None, greedy=True, score_outputs=False)
    from .tasks import verify

    return float(np.mean([verify(i, r.response) for i, r in zip(instances, recs)]))


def _table(scores: dict, cfg) -> str:
    lines = [f"{'suite':<12} {'pass@1':>8}   (n={cfg.eval.eval_samples_per_prompt}, seed={cfg.run.seed})"]
    for k, v in scores.items():
        lines.append(f"{k:<12} {v:>8.4f}")
    return "\n".join(lines)


def cmd_train(args) -> int:
    header = None
    if args.resume and args.config is None:
        from . import checkpoint

        header = checkpoint.load(args.resume)[0]
    if args.steps is not None:
        args.override = list(args.override or []) + [f"run.total_steps={args.steps}"]
    cfg = _load_cfg(args, header)
    out = _out_dir(args.out)
    params = None
    resume = args.resume
    if not args.resume and args.ckpt:
        params, _ = pm.load_policy(args.ckpt)
    state, records = trainer.run(cfg, out, params=params, resume_from=resume)
    last = [r for r in records if r.pass1_eval_base is not None]
    if last:
        print(f"final step {state.step}: pass@1 base {last[-1].pass1_eval_base:.4f}  perturbed {last[-1].pass1_eval_perturbed:.4f}")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, header = _load_params(args.ckpt)
    cfg = _load_cfg(args, header)
    overrides = [f"eval.eval_samples_per_prompt={args.n}"] if args.n is not None else []
    if overrides:
        cfg = config_mod.from_dict(config_mod.apply_overrides(cfg.to_dict(), overrides))
    _, suites = trainer.build_tasks(cfg)
    names = SUITES if args.suite in (None, "all") else (args.suite,)
    chosen = {k: suites[k] for k in names}
    scores = trainer.evaluate(params, chosen, cfg.eval.sampling(cfg.sampling.max_response_len), cfg.run.seed)
    print(_table(scores, cfg))
    if args.out:
        out = _out_dir(args.out)
        rec = {"ckpt": str(args.ckpt), "seed": cfg.run.seed, "n": cfg.eval.eval_samples_per_prompt,
               "prompts": {k: len(v) for k, v in chosen.items()}, "pass1": scores}
        (out / "eval.json").write_text(json.dumps(rec, indent=2) + "\n")
    return EXIT_OK


def export_embeddings(cfg, params, head, steps: int, path) -> int:
    """Sample ``steps`` batches of groups with no updates and write one CSV row per rollout."""
    train, _ = trainer.build_tasks(cfg)
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "group_id", "rollout_id", "reward"] + [f"e_{j}" for j in range(head.out_dim)])
        for step in range(1, steps + 1):
            idx = trainer.derive_rng(cfg.run.seed, "export", step).choice(len(train), size=cfg.run.prompts_per_step, replace=False)
            batch = [train[i] for i in idx]
            rngs = [trainer.derive_rng(cfg.run.seed, "export", step, k) for k in range(len(batch))]
            groups = pm.sample_groups(params, batch, cfg.sampling, rngs)
            for g_id, g in enumerate(groups):
                embs = cl.embed(head, np.stack([r.hidden_states.mean(axis=0) for r in g.rollouts])).data
                for r_id, (r, e) in enumerate(zip(g.rollouts, embs)):
                    w.writerow([step, g_id, r_id, r.reward] + [repr(float(x)) for x in e])
                    rows += 1
    return rows


def cmd_export_embeddings(args) -> int:
    params, header = _load_params(args.ckpt)
    cfg = _load_cfg(args, header)
    if header.get("kind") == "run":
        state, _ = trainer.load_state(args.ckpt, cfg)
        head = state.head
    else:
        head = trainer.RunState.fresh(cfg, params).head
    out = Path(args.out)
    if out.parent:
        _out_dir(out.parent)
    n = export_embeddings(cfg, params, head, args.steps, out)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = selfcheck.run_all(quick=args.quick)
    print(selfcheck.report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False, out=True):
        sp.add_argument("--config", type=Path, help="TOML experiment config")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="section.key=value (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true", help="pin every thread pool to one worker")
        if ckpt:
            sp.add_argument("--ckpt", type=Path)
        if out:
            sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("pretrain", help="supervised warm-up of a fresh policy")
    common(sp)
    sp.add_argument("--steps", type=int, help="override run.pretrain_steps")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train", help="RLVR training (optionally with contrastive shaping)")
    common(sp, ckpt=True)
    sp.add_argument("--steps", type=int, help="override run.total_steps")
    sp.add_argument("--resume", type=Path, help="run checkpoint to continue from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="pass@1 on the evaluation suites")
    common(sp, ckpt=True, out=False)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--suite", choices=SUITES + ("all",), default="all")
    sp.add_argument("--n", type=int, help="samples per prompt (default from config)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export-embeddings", help="write head embeddings of sampled groups to CSV")
    common(sp, ckpt=True)
    sp.add_argument("--steps", type=int, default=1)
    sp.set_defaults(fn=cmd_export_embeddings)

    sp = sub.add_parser("selfcheck", help="gradient, identity and hand-trace checks")
    sp.add_argument("--quick", action="store_true")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        _pin_threads()
    try:
        return args.fn(args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ClipoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
