"""Command-line driver: subcommands, exit codes and file contracts."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from clipo import autograd as ag
from clipo import checkpoint, cli, trainer
from clipo import config as config_mod
from clipo import policy as pm

SMALL_TOML = """
[run]
seed = 5
total_steps = 3
prompts_per_step = 2
checkpoint_every = 3
pretrain_steps = 3
d_model = 16
n_layers = 1

[sampling]
group_size = 4
max_response_len = 16

[tasks]
n_train = 50
n_eval = 4

[eval]
eval_every = 3
eval_samples_per_prompt = 4

[contrastive]
head_warmup_steps = 1
d = 8
"""


@pytest.fixture
def small_toml(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return path


class TestPretrain:
    def test_zero_steps_is_fresh_init(self, tmp_path, small_toml, capsys):
        assert cli.main(["pretrain", "--config", str(small_toml), "--out", str(tmp_path / "p"), "--steps", "0"]) == 0
        params, header = pm.load_policy(tmp_path / "p" / "policy.ckpt")
        cfg = config_mod.load(small_toml)
        fresh = pm.init(cfg.run.dims(), seed=trainer.derive_seed(5, "policy_init"))
        assert params.hash() == fresh.hash()
        assert header["kind"] == "policy"
        assert "pass@1" in capsys.readouterr().out

    def test_seeded_twice_identical(self, tmp_path, small_toml):
        for name in ("a", "b"):
            assert cli.main(["pretrain", "--config", str(small_toml), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "policy.ckpt").read_bytes() == (tmp_path / "b" / "policy.ckpt").read_bytes()
        losses = json.loads((tmp_path / "a" / "pretrain_losses.json").read_text())
        assert len(losses) == 3

    def test_report_matches_eval_command(self, tmp_path, small_toml):
        out = tmp_path / "p"
        cli.main(["pretrain", "--config", str(small_toml), "--out", str(out)])
        report = json.loads((out / "pretrain_report.json").read_text())
        assert cli.main(["eval", "--config", str(small_toml), "--ckpt", str(out / "policy.ckpt"), "--out", str(tmp_path / "e")]) == 0
        evaluated = json.loads((tmp_path / "e" / "eval.json").read_text())
        assert evaluated["pass1"] == report["pass1"]
        assert evaluated["prompts"] == {"base": 4, "perturbed1": 4, "perturbed2": 4}
        assert evaluated["seed"] == 5 and evaluated["n"] == 4


class TestTrain:
    def test_run_directory_and_echo(self, tmp_path, small_toml):
        out = tmp_path / "run"
        code = cli.main(["train", "--config", str(small_toml), "--out", str(out), "--override", "sampling.group_size=32", "--deterministic"])
        assert code == 0
        echo = config_mod.load(out / "config.toml")
        assert echo.sampling.group_size == 32
        assert {"metrics.jsonl", "eval.jsonl", "step00003.ckpt", "final.ckpt"} <= {p.name for p in out.iterdir()}
        rows = trainer.read_metrics(out / "metrics.jsonl")
        assert [r["step"] for r in rows] == [0, 1, 2, 3]

    def test_baseline_run_from_checkpoint(self, tmp_path, small_toml):
        cli.main(["pretrain", "--config", str(small_toml), "--out", str(tmp_path / "p")])
        out = tmp_path / "run"
        args = ["train", "--config", str(small_toml), "--ckpt", str(tmp_path / "p" / "policy.ckpt"), "--out", str(out), "--override", "contrastive.contrastive_enabled=false"]
        assert cli.main(args) == 0
        rows = trainer.read_metrics(out / "metrics.jsonl")
        assert all(r["mean_contrastive_loss"] is None for r in rows)

    def test_resume_uses_stored_config(self, tmp_path, small_toml):
        out = tmp_path / "run"
        cli.main(["train", "--config", str(small_toml), "--out", str(out)])
        again = tmp_path / "again"
        assert cli.main(["train", "--resume", str(out / "step00003.ckpt"), "--out", str(again), "--steps", "4"]) == 0
        rows = trainer.read_metrics(again / "metrics.jsonl")
        assert [r["step"] for r in rows] == [4]

    def test_config_errors_listed_together(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[run]\nsede = 1\ntotal_step = 2\n[contrastive]\ntemp = 0.1\n")
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
        err = capsys.readouterr().err
        for key in ("run.sede", "run.total_step", "contrastive.temp"):
            assert key in err

    def test_numeric_failure_exit_code(self, tmp_path, small_toml, monkeypatch):
        def boom(*a, **k):
            raise trainer.NumericFailure("step 1: policy loss is nan")

        monkeypatch.setattr(trainer, "run", boom)
        assert cli.main(["train", "--config", str(small_toml), "--out", str(tmp_path / "x")]) == 3


class TestEval:
    def test_missing_checkpoint(self, tmp_path, capsys):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ckpt")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_single_suite(self, tmp_path, small_toml, capsys):
        cli.main(["pretrain", "--config", str(small_toml), "--out", str(tmp_path / "p"), "--steps", "0"])
        capsys.readouterr()
        assert cli.main(["eval", "--config", str(small_toml), "--ckpt", str(tmp_path / "p" / "policy.ckpt"), "--suite", "perturbed2", "--n", "2"]) == 0
        out = capsys.readouterr().out
        assert "perturbed2" in out and "perturbed1" not in out and "n=2" in out


class TestExportEmbeddings:
    def test_schema_count_and_norms(self, tmp_path, small_toml):
        cli.main(["train", "--config", str(small_toml), "--out", str(tmp_path / "run")])
        csv_path = tmp_path / "emb.csv"
        args = ["export-embeddings", "--ckpt", str(tmp_path / "run" / "final.ckpt"), "--steps", "3", "--out", str(csv_path)]
        assert cli.main(args) == 0
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "group_id", "rollout_id", "reward"] + [f"e_{j}" for j in range(8)]
        assert len(rows) - 1 == 3 * 2 * 4
        for row in rows[1:]:
            e = np.array([float(v) for v in row[4:]])
            assert abs(np.linalg.norm(e) - 1.0) < 1e-6
            assert row[3] in ("0", "1")

    def test_head_comes_from_run_checkpoint(self, tmp_path, small_toml):
        cli.main(["train", "--config", str(small_toml), "--out", str(tmp_path / "run")])
        state, cfg = trainer.load_state(tmp_path / "run" / "final.ckpt")
        csv_path = tmp_path / "emb.csv"
        cli.main(["export-embeddings", "--ckpt", str(tmp_path / "run" / "final.ckpt"), "--out", str(csv_path)])
        with open(csv_path) as fh:
            first = next(r for r in csv.DictReader(fh) if r["group_id"] == "0" and r["rollout_id"] == "0")
        train, _ = trainer.build_tasks(cfg)
        idx = trainer.derive_rng(cfg.run.seed, "export", 1).choice(len(train), size=cfg.run.prompts_per_step, replace=False)
        groups = pm.sample_groups(state.params, [train[i] for i in idx], cfg.sampling, [trainer.derive_rng(cfg.run.seed, "export", 1, k) for k in range(len(idx))])
        from clipo import contrastive as cl

        e = cl.embed(state.head, groups[0].rollouts[0].hidden_states.mean(axis=0)).data
        np.testing.assert_allclose([float(first[f"e_{j}"]) for j in range(8)], e, atol=1e-15)


class TestSelfcheck:
    def test_fresh_build_passes(self, capsys):
        assert cli.main(["selfcheck", "--quick"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[-1].endswith("checks passed")
        for line in out[:-1]:
            assert line.startswith("PASS") and "tol=" in line and "measured=" in line

    def test_broken_backward_fails_loudly(self, monkeypatch, capsys):
        """Negative control: a log-softmax whose backward rule is off by 1%."""
        real = ag.log_softmax

        def broken(x):
            out = real(x)
            if out.requires_grad:
                node = ag._ACTIVE[-1].nodes[-1]
                good = node.backward
                node.backward = lambda g: tuple(1.01 * v for v in good(g))
            return out

        monkeypatch.setattr(ag, "log_softmax", broken)
        assert cli.main(["selfcheck", "--quick"]) == 4
        out = capsys.readouterr().out
        assert "FAIL  grad: log_softmax" in out


class TestModuleEntryPoint:
    def test_help(self):
        res = subprocess.run([sys.executable, "-m", "clipo", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for sub in ("pretrain", "train", "eval", "export-embeddings", "selfcheck"):
            assert sub in res.stdout

    def test_checkpoint_module_rejects_garbage(self, tmp_path):
        (tmp_path / "g.ckpt").write_bytes(b"garbage")
        with pytest.raises(trainer.CheckpointError):
            checkpoint.load(tmp_path / "g.ckpt")
