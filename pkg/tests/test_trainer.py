"""Training loop: one hand-traced step, warmup, ablations, evaluation, checkpoints, runs."""

import json
import math
import zlib
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from clipo import checkpoint
from clipo import policy as pm
from clipo import selfcheck, trainer
from clipo.errors import CheckpointError, NumericFailure
from clipo.policy import RolloutGroup, RolloutRecord
from clipo.tasks import EOS, solution_tokens, verify

from conftest import small_cfg


def _hand_expected(cfg, state, group):
    """Every intermediate of the crafted step, at 30 digits."""
    mpmath.mp.dps = 30
    W = mpmath.matrix(state.head.W.data.tolist())
    tau, lam = mpmath.mpf(cfg.contrastive.tau), mpmath.mpf(cfg.contrastive.lam)
    embs = []
    for r in group.rollouts:
        h = r.hidden_states
        pooled = mpmath.matrix([mpmath.fsum(mpmath.mpf(float(v)) for v in h[:, j]) / h.shape[0] for j in range(h.shape[1])])
        z = W * pooled
        embs.append(z / mpmath.norm(z))
    s = [[mpmath.fdot(a, b) / tau for b in embs] for a in embs]
    rewards = [r.reward for r in group.rollouts]
    losses, rcl = [], [mpmath.mpf(0)] * 4
    for i, p in ((0, 1), (1, 0)):
        L = -(s[i][p] - mpmath.log(mpmath.fsum(mpmath.exp(v) for v in s[i])))
        losses.append(L)
        rcl[i] = max(-lam * L, mpmath.mpf(-0.5))
    total = [rewards[i] + rcl[i] for i in range(4)]
    mu = mpmath.fsum(total) / 4
    sd = mpmath.sqrt(mpmath.fsum((t - mu) ** 2 for t in total) / 4)
    adv = [(t - mu) / sd for t in total]
    n = [r.response_len for r in group.rollouts]
    loss = -mpmath.fsum(a * k for a, k in zip(adv, n)) / sum(n)
    return {
        "shaped": np.array([float(t) for t in total]),
        "advantages": np.array([float(a) for a in adv]),
        "policy_loss": float(loss),
        "mean_anchor_loss": float(mpmath.fsum(losses) / 2),
    }


class TestHandTracedStep:
    @pytest.mark.parametrize("method", ["grpo", "dapo", "gmpo"])
    def test_every_intermediate(self, method):
        """One crafted 4-rollout group (rewards 1,1,0,0) against an extended-precision trace."""
        cfg, state, group = selfcheck.hand_trace_setup(method)
        want = _hand_expected(cfg, state, group)
        rec, trace = trainer.step_on_groups(state, cfg, [group], step=1)
        np.testing.assert_allclose(trace.shaped[0].total, want["shaped"], atol=1e-9, rtol=0)
        np.testing.assert_allclose(trace.advantages[0].advantages, want["advantages"], atol=1e-9, rtol=0)
        assert abs(trace.policy_loss - want["policy_loss"]) < 1e-9
        assert abs(rec.mean_contrastive_loss - want["mean_anchor_loss"]) < 1e-9
        assert rec.mi_lower_bound == pytest.approx(math.log(4) - rec.mean_contrastive_loss, abs=1e-15)
        assert rec.kl_to_ref == 0.0
        assert trace.head_updated

    def test_cosines_use_reward_embeddings(self):
        cfg, state, group = selfcheck.hand_trace_setup()
        rec, trace = trainer.step_on_groups(state, cfg, [group], step=1)
        e = trace.embeddings[0]
        assert rec.mean_pos_pair_cosine == pytest.approx(float(e[0] @ e[1]), abs=1e-15)

    def test_reference_never_moves(self):
        cfg, state, group = selfcheck.hand_trace_setup()
        ref_hash = state.ref_params.hash()
        trainer.step_on_groups(state, cfg, [group], step=1)
        assert state.params.hash() != ref_hash
        assert state.ref_params.hash() == ref_hash

    def test_all_groups_filtered_is_a_noop(self):
        cfg, state, group = selfcheck.hand_trace_setup("dapo")
        for r in group.rollouts:
            r.reward = 0
        before = state.params.hash()
        rec, trace = trainer.step_on_groups(state, cfg, [group], step=1)
        assert rec.dropped_groups == 1 and trace.policy_loss is None
        assert state.params.hash() == before


class TestWarmup:
    def test_zero_warmup_steps(self, warm_params):
        cfg = small_cfg(contrastive={"head_warmup_steps": 0})
        train, _ = trainer.build_tasks(cfg)
        state = trainer.RunState.fresh(cfg, warm_params)
        head = state.head.hash()
        assert trainer.warmup_head(state, cfg, train) == []
        assert state.step == 0 and state.head.hash() == head

    def test_policy_paused_and_loss_trends_down(self, warm_params):
        """60 head-only steps: policy hash fixed; 20-step moving average of the loss trends down.

        Every step draws new prompts, so single steps are noisy; the trend is
        the least-squares slope of the moving average.
        """
        W = 60
        cfg = small_cfg(contrastive={"head_warmup_steps": W}, run={"total_steps": W, "prompts_per_step": 8}, sampling={"group_size": 16})
        train, _ = trainer.build_tasks(cfg)
        state = trainer.RunState.fresh(cfg, warm_params)
        before, head = state.params.hash(), state.head.hash()
        recs = trainer.warmup_head(state, cfg, train)
        assert len(recs) == W and state.step == W
        assert state.params.hash() == before
        assert state.head.hash() != head
        for r in recs:
            assert r.mean_shaped_reward == r.mean_base_reward
        losses = np.array([r.mean_contrastive_loss for r in recs], dtype=float)
        assert np.isfinite(losses).all()
        ma = np.convolve(losses, np.ones(20) / 20, mode="valid")
        slope = np.polyfit(np.arange(len(ma)), ma, 1)[0]
        assert slope <= 0.0 and ma[-1] <= ma[0]

    def test_warmup_may_update_policy_when_asked(self, warm_params):
        cfg = small_cfg(contrastive={"head_warmup_steps": 1, "warmup_updates_policy": True})
        train, _ = trainer.build_tasks(cfg)
        state = trainer.RunState.fresh(cfg, warm_params)
        before = state.params.hash()
        trainer.warmup_head(state, cfg, train)
        assert state.params.hash() != before


def _gold_sampler(params, instances, sampling, rngs, score_outputs=False):
    groups = []
    for inst in instances:
        recs = []
        for _ in range(sampling.group_size):
            resp = solution_tokens(inst)
            recs.append(RolloutRecord(len(inst.prompt_tokens), np.array(list(inst.prompt_tokens) + resp), np.empty(0), np.empty(0)))
        groups.append(RolloutGroup(inst, recs))
    for g in groups:
        for r in g.rollouts:
            r.reward = verify(g.instance, r.response)
    return groups


def _silent_sampler(params, instances, sampling, rngs, score_outputs=False):
    groups = _gold_sampler(params, instances, sampling, rngs)
    for g in groups:
        for r in g.rollouts:
            r.tokens = np.array(list(g.instance.prompt_tokens) + [3, 4, EOS])
            r.reward = verify(g.instance, r.response)
    return groups


class TestEvaluate:
    def _suites(self):
        _, suites = trainer.build_tasks(small_cfg(tasks={"n_eval": 20}))
        return suites

    def test_gold_policy(self):
        scores = trainer.evaluate(None, self._suites(), pm.SamplingConfig(group_size=4), 0, sample_fn=_gold_sampler)
        assert scores == {"base": 1.0, "perturbed1": 1.0, "perturbed2": 1.0}

    def test_never_answers(self):
        scores = trainer.evaluate(None, self._suites(), pm.SamplingConfig(group_size=4), 0, sample_fn=_silent_sampler)
        assert scores == {"base": 0.0, "perturbed1": 0.0, "perturbed2": 0.0}

    def test_counting_oracle(self, warm_params):
        """n=16 over 50 prompts equals the exact count of verified samples."""
        _, suites = trainer.build_tasks(small_cfg(tasks={"n_eval": 50}))
        sampling = pm.SamplingConfig(temperature=0.6, top_p=0.95, group_size=16)
        seen = []

        def spy(*args, **kw):
            groups = pm.sample_groups(*args, **kw)
            seen.extend(groups)
            return groups

        score = trainer.evaluate(warm_params, {"base": suites["base"]}, sampling, seed=7, sample_fn=spy)
        assert len(seen) == 50 and all(len(g) == 16 for g in seen)
        correct = sum(int(r.reward) for g in seen for r in g.rollouts)
        assert 0 < correct < 800
        assert score["base"] == float(Fraction(correct, 800))

    def test_streams_are_per_prompt(self, warm_params):
        """Chunking and suite membership do not change any prompt's samples."""
        _, suites = trainer.build_tasks(small_cfg(tasks={"n_eval": 10}))
        sampling = pm.SamplingConfig(temperature=0.6, top_p=0.95, group_size=4)
        a = trainer.evaluate(warm_params, {"base": suites["base"]}, sampling, 3, chunk=16)
        b = trainer.evaluate(warm_params, {"base": suites["base"], "perturbed1": suites["perturbed1"]}, sampling, 3, chunk=3)
        assert a["base"] == b["base"]
        assert zlib.crc32(b"base") != zlib.crc32(b"perturbed1")


class TestCheckpoints:
    def test_round_trip_byte_identical(self, tmp_path, warm_params):
        cfg = small_cfg()
        train, _ = trainer.build_tasks(cfg)
        state = trainer.RunState.fresh(cfg, warm_params)
        trainer.train_step(state, cfg, train)
        trainer.save_state(tmp_path / "a.ckpt", state, cfg)
        loaded, cfg2 = trainer.load_state(tmp_path / "a.ckpt")
        assert cfg2 == cfg
        trainer.save_state(tmp_path / "b.ckpt", loaded, cfg2)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncated_file(self, tmp_path):
        params = pm.init(pm.PolicyDims(d_model=8, n_layers=1), 0)
        pm.save_policy(tmp_path / "p.ckpt", params)
        raw = (tmp_path / "p.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-100])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.load(tmp_path / "t.ckpt")

    def test_version_mismatch_names_field(self, tmp_path):
        checkpoint.save(tmp_path / "c.ckpt", {"kind": "policy"}, {"x": np.zeros(2)})
        raw = (tmp_path / "c.ckpt").read_bytes().replace(b'"version":1', b'"version":9')
        (tmp_path / "c.ckpt").write_bytes(raw)
        with pytest.raises(CheckpointError, match="'version'"):
            checkpoint.load(tmp_path / "c.ckpt")

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"{not json\n")
        with pytest.raises(CheckpointError, match="header"):
            checkpoint.load(tmp_path / "c.ckpt")

    def test_policy_checkpoint_is_not_a_run(self, tmp_path):
        pm.save_policy(tmp_path / "p.ckpt", pm.init(pm.PolicyDims(d_model=8, n_layers=1)))
        with pytest.raises(CheckpointError, match="'kind'"):
            trainer.load_state(tmp_path / "p.ckpt")


class TestRun:
    def test_zero_steps_emits_initial_eval_only(self, tmp_path, warm_params):
        cfg = small_cfg(run={"total_steps": 0}, contrastive={"head_warmup_steps": 0})
        _, records = trainer.run(cfg, tmp_path, params=warm_params)
        assert [r.step for r in records] == [0]
        assert records[0].pass1_eval_base is not None and records[0].mean_base_reward is None
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1 and set(json.loads(lines[0])) == set(trainer.METRIC_FIELDS)
        assert (tmp_path / "final.ckpt").exists()

    def test_run_directory_contents(self, tmp_path, warm_params):
        cfg = small_cfg()
        _, records = trainer.run(cfg, tmp_path, params=warm_params)
        assert [r.step for r in records] == list(range(7))
        names = {p.name for p in tmp_path.iterdir()}
        assert {"config.toml", "metrics.jsonl", "eval.jsonl", "step00003.ckpt", "step00006.ckpt", "final.ckpt"} <= names
        evals = [json.loads(l) for l in (tmp_path / "eval.jsonl").read_text().splitlines()]
        assert [e["step"] for e in evals] == [0, 3, 6]
        warm = [r for r in records[1:] if r.step <= 2]
        assert all(r.mean_shaped_reward == r.mean_base_reward for r in warm)

    def test_deterministic(self, tmp_path, warm_params):
        cfg = small_cfg()
        trainer.run(cfg, tmp_path / "a", params=warm_params.copy())
        trainer.run(cfg, tmp_path / "b", params=warm_params.copy())
        for name in ("metrics.jsonl", "eval.jsonl", "final.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path, warm_params):
        cfg = small_cfg()
        trainer.run(cfg, tmp_path / "full", params=warm_params.copy())
        trainer.run(cfg, tmp_path / "part", params=warm_params.copy(), stop_at=4)
        # step 4 was written after the step-3 checkpoint and must be replaced on resume
        assert len((tmp_path / "part" / "metrics.jsonl").read_text().splitlines()) == 5
        trainer.run(cfg, tmp_path / "part", resume_from=tmp_path / "part" / "step00003.ckpt")
        for name in ("metrics.jsonl", "eval.jsonl", "final.ckpt"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()

    def test_disabled_contrastive_is_inert(self, tmp_path, warm_params):
        """With shaping off, no contrastive setting can change the trajectory."""
        a = small_cfg(contrastive={"contrastive_enabled": False})
        b = small_cfg(contrastive={"contrastive_enabled": False, "tau": 0.5, "lam": 1.0, "loss_kind": "softnn", "d": 7, "head_lr": 0.1, "head_warmup_steps": 5})
        sa, ra = trainer.run(a, tmp_path / "a", params=warm_params.copy())
        sb, rb = trainer.run(b, tmp_path / "b", params=warm_params.copy())
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert sa.params.hash() == sb.params.hash()
        for r in ra[1:]:
            assert r.mean_contrastive_loss is None and r.mi_lower_bound is None and r.frac_valid_groups is None
            assert r.mean_shaped_reward == r.mean_base_reward

    def test_fixed_head(self, tmp_path, warm_params):
        cfg = small_cfg(contrastive={"fixed_head": True})
        fresh = trainer.RunState.fresh(cfg, warm_params.copy()).head.hash()
        state, records = trainer.run(cfg, tmp_path, params=warm_params.copy())
        assert state.head.hash() == fresh
        final, _ = trainer.load_state(tmp_path / "final.ckpt")
        assert final.head.hash() == fresh
        shaped = [r for r in records[3:] if r.frac_valid_groups]
        assert shaped and any(r.mean_shaped_reward < r.mean_base_reward for r in shaped)

    @staticmethod
    def _poison_kl(monkeypatch):
        real = trainer.obj.kl_estimate

        def poisoned(new, ref, mask=None):
            out = real(new, ref, mask)
            out.data[...] = np.nan
            return out

        monkeypatch.setattr(trainer.obj, "kl_estimate", poisoned)

    def test_non_finite_metric_aborts_with_dump(self, tmp_path, warm_params, monkeypatch):
        """gmpo has no KL term in its loss, so only the logged metric goes bad."""
        self._poison_kl(monkeypatch)
        cfg = small_cfg(contrastive={"contrastive_enabled": False}, method={"method": "gmpo"})
        with pytest.raises(NumericFailure, match="kl_to_ref"):
            trainer.run(cfg, tmp_path, params=warm_params)
        dump = json.loads((tmp_path / "failure_step1.json").read_text())
        assert dump["non_finite"] == ["kl_to_ref"]
        assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 1

    def test_non_finite_loss_aborts_before_update(self, tmp_path, warm_params, monkeypatch):
        self._poison_kl(monkeypatch)
        cfg = small_cfg(contrastive={"contrastive_enabled": False})
        with pytest.raises(NumericFailure, match="policy loss is nan"):
            trainer.run(cfg, tmp_path, params=warm_params)
        assert (tmp_path / "failure_step1.json").exists()
