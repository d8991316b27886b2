"""Shared fixtures: small configs and one warm-started policy per session."""

import pytest

from clipo import config as config_mod
from clipo import trainer


def small_overrides(**extra):
    """A config small enough for unit tests while keeping the default policy size."""
    base = {
        "run": {"total_steps": 6, "prompts_per_step": 3, "checkpoint_every": 3, "pretrain_steps": 200},
        "sampling": {"group_size": 8},
        "tasks": {"n_train": 200, "n_eval": 6},
        "eval": {"eval_every": 3, "eval_samples_per_prompt": 4},
        "contrastive": {"head_warmup_steps": 2},
    }
    for sec, kv in extra.items():
        base.setdefault(sec, {}).update(kv)
    return base


def small_cfg(**extra):
    return config_mod.from_dict(small_overrides(**extra))


@pytest.fixture(scope="session")
def warm_policy():
    """Default-size policy after the default supervised warm-up (seed 0)."""
    cfg = config_mod.from_dict({})
    params, losses = trainer.pretrain(cfg)
    return params, losses


@pytest.fixture
def warm_params(warm_policy):
    return warm_policy[0].copy()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines after the run, so they survive output capture."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
