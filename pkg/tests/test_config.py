"""Experiment configuration: defaults, validation, overrides and the echo."""

import pytest

from clipo import config as config_mod
from clipo.errors import ConfigError


class TestDefaults:
    def test_empty_config_resolves_method_defaults(self):
        cfg = config_mod.from_dict({})
        assert cfg.method.method == "grpo"
        assert (cfg.method.eps_low, cfg.method.eps_high, cfg.method.kl_coef) == (0.2, 0.2, 0.001)
        assert cfg.method.agg_mode == "token-mean"
        assert cfg.contrastive.tau == 0.05 and cfg.contrastive.lam == 0.2
        assert cfg.sampling.group_size == 16
        assert (cfg.eval.eval_temperature, cfg.eval.eval_top_p, cfg.eval.eval_samples_per_prompt) == (0.6, 0.95, 16)

    @pytest.mark.parametrize("method,eps", [("gspo", (3e-4, 4e-4)), ("dapo", (0.2, 0.28)), ("gmpo", (0.4, 0.4))])
    def test_method_switch(self, method, eps):
        cfg = config_mod.from_dict({"method": {"method": method}})
        assert (cfg.method.eps_low, cfg.method.eps_high) == eps
        assert cfg.method.kl_coef == 0.0

    def test_explicit_value_beats_method_default(self):
        cfg = config_mod.from_dict({"method": {"method": "dapo", "eps_high": 0.2}})
        assert cfg.method.surrogate().eps_high == 0.2

    def test_lambda_follows_loss_kind(self):
        assert config_mod.from_dict({"contrastive": {"loss_kind": "softnn"}}).contrastive.lam == 1.0
        assert config_mod.from_dict({"contrastive": {"loss_kind": "supcon"}}).contrastive.lam == 0.2

    def test_method_table_exposed(self):
        table = config_mod.method_table()
        assert set(table) == {"grpo", "gspo", "dapo", "gmpo"}
        assert table["dapo"]["dynamic_sampling"] is True


class TestValidation:
    def test_every_unknown_key_reported(self):
        with pytest.raises(ConfigError) as info:
            config_mod.from_dict({"run": {"sede": 1, "total_step": 3}, "contrastive": {"temp": 0.1}, "extra": {}})
        problems = info.value.problems
        assert "unknown key run.sede" in problems
        assert "unknown key run.total_step" in problems
        assert "unknown key contrastive.temp" in problems
        assert "unknown section [extra]" in problems

    def test_wrong_types_reported(self):
        with pytest.raises(ConfigError) as info:
            config_mod.from_dict({"run": {"seed": "zero"}, "contrastive": {"fixed_head": 1}})
        assert len(info.value.problems) == 2

    def test_int_accepted_for_float(self):
        assert config_mod.from_dict({"contrastive": {"tau": 1}}).contrastive.tau == 1.0

    def test_warmup_longer_than_run(self):
        with pytest.raises(ConfigError, match="head_warmup_steps"):
            config_mod.from_dict({"run": {"total_steps": 5}, "contrastive": {"head_warmup_steps": 10}})

    def test_warmup_irrelevant_when_disabled(self):
        cfg = config_mod.from_dict({"run": {"total_steps": 5}, "contrastive": {"head_warmup_steps": 10, "contrastive_enabled": False}})
        assert cfg.run.total_steps == 5

    def test_component_contracts_surface(self):
        with pytest.raises(ConfigError) as info:
            config_mod.from_dict({"method": {"method": "ppo"}})
        assert "method" in str(info.value)
        with pytest.raises(ConfigError):
            config_mod.from_dict({"sampling": {"group_size": 1}})
        with pytest.raises(ConfigError):
            config_mod.from_dict({"run": {"d_model": 10, "n_heads": 4}})


class TestOverridesAndEcho:
    def test_parse_override_types(self):
        assert config_mod.parse_override("sampling.group_size=32") == ("sampling", "group_size", 32)
        assert config_mod.parse_override("contrastive.fixed_head=true") == ("contrastive", "fixed_head", True)
        assert config_mod.parse_override("method.method=gspo") == ("method", "method", "gspo")
        assert config_mod.parse_override('method.method="dapo"') == ("method", "method", "dapo")

    @pytest.mark.parametrize("bad", ["group_size=32", "sampling.group_size", "a.b.c=1"])
    def test_malformed_override(self, bad):
        with pytest.raises(ConfigError):
            config_mod.parse_override(bad)

    def test_override_on_top_of_file(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[sampling]\ngroup_size = 8\n[run]\nseed = 3\n")
        cfg = config_mod.load(path, ["sampling.group_size=32"])
        assert cfg.sampling.group_size == 32 and cfg.run.seed == 3

    def test_echo_round_trip(self, tmp_path):
        cfg = config_mod.load(None, ["method.method=dapo", "contrastive.tau=0.1", "run.seed=4"])
        config_mod.echo(cfg, tmp_path / "echo.toml")
        again = config_mod.load(tmp_path / "echo.toml")
        assert again == cfg and again.digest() == cfg.digest()

    def test_echo_lists_every_key(self):
        text = config_mod.from_dict({}).to_toml()
        for sec, cls in config_mod.SECTIONS.items():
            assert f"[{sec}]" in text
            for name in cls.__dataclass_fields__:
                assert f"\n{name} = " in text, f"{sec}.{name} missing from echo"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            config_mod.load(tmp_path / "nope.toml")

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[run\nseed = 1\n")
        with pytest.raises(ConfigError):
            config_mod.load(path)
