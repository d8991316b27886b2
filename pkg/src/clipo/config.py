"""Experiment configuration: six TOML sections mirroring :class:`TrainConfig`.

Missing keys take the defaults below, unknown keys are rejected (all of them
are reported at once), and the fully resolved configuration can be written
back out as TOML so a run directory always records every value it used.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import tomli
import tomli_w

from .contrastive import DEFAULT_LAMBDA, ContrastiveConfig
from .errors import ConfigError, ContractError
from .objectives import METHODS, SurrogateConfig, method_defaults
from .policy import PolicyDims, SamplingConfig
from .tasks import TaskFamily


@dataclass(frozen=True)
class MethodSection:
    """Surrogate objective. Fields left at ``None`` take the method's own defaults."""

    method: str = "grpo"
    eps_low: float | None = None
    eps_high: float | None = None
    kl_coef: float | None = None
    agg_mode: str | None = None
    dynamic_sampling: bool | None = None
    std_guard: float = 1e-6
    pessimistic: bool = True

    def surrogate(self) -> SurrogateConfig:
        overrides = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "method"}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return SurrogateConfig.for_method(self.method, **overrides)


@dataclass(frozen=True)
class ContrastiveSection:
    contrastive_enabled: bool = True
    tau: float = 0.05
    lam: float | None = None
    loss_kind: str = "infonce"
    clip_floor: float = -0.5
    d: int = 32
    exclude_self: bool = False
    head_lr: float = 1e-3
    head_weight_decay: float = 0.01
    head_warmup_steps: int = 20
    fixed_head: bool = False
    backprop_into_policy: bool = False
    warmup_updates_policy: bool = False

    def core(self) -> ContrastiveConfig:
        lam = DEFAULT_LAMBDA.get(self.loss_kind, 0.2) if self.lam is None else self.lam
        return ContrastiveConfig(
            tau=self.tau,
            lam=lam,
            loss_kind=self.loss_kind,
            clip_floor=self.clip_floor,
            d=self.d,
            exclude_self=self.exclude_self,
            head_lr=self.head_lr,
            head_weight_decay=self.head_weight_decay,
        )


@dataclass(frozen=True)
class TasksSection:
    n_operands: int = 3
    operand_max: int = 9
    modulus: int = 7
    operators: str = "+*"
    perturbed_operand_max: int = 19
    distractor_clauses: int = 2
    n_train: int = 2000
    n_eval: int = 100
    task_seed: int = 1234

    def base_family(self) -> TaskFamily:
        return TaskFamily(self.n_operands, self.operand_max, self.modulus, 0, "base", self.operators)


@dataclass(frozen=True)
class EvalSection:
    eval_every: int = 50
    eval_samples_per_prompt: int = 16
    eval_temperature: float = 0.6
    eval_top_p: float = 0.95

    def sampling(self, max_response_len: int) -> SamplingConfig:
        return SamplingConfig(self.eval_temperature, self.eval_top_p, max_response_len, self.eval_samples_per_prompt)


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    total_steps: int = 300
    prompts_per_step: int = 8
    policy_lr: float = 3e-4
    policy_weight_decay: float = 0.01
    pretrain_steps: int = 200
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 64
    checkpoint_every: int = 100
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 96
    ffn_mult: int = 4

    def dims(self) -> PolicyDims:
        return PolicyDims(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, max_len=self.max_len, ffn_mult=self.ffn_mult)


SECTIONS = {
    "method": MethodSection,
    "contrastive": ContrastiveSection,
    "sampling": SamplingConfig,
    "tasks": TasksSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class TrainConfig:
    method: MethodSection = field(default_factory=MethodSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    tasks: TasksSection = field(default_factory=TasksSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def resolved(self) -> "TrainConfig":
        """Copy with every method- or loss-dependent default filled in."""
        sur = self.method.surrogate()
        method = replace(self.method, **{f.name: getattr(sur, f.name) for f in fields(MethodSection)})
        contrastive = replace(self.contrastive, lam=self.contrastive.core().lam)
        return replace(self, method=method, contrastive=contrastive)

    def validate(self) -> None:
        problems = []
        run, con = self.run, self.contrastive
        if run.total_steps < 0:
            problems.append("run.total_steps must be >= 0")
        if con.head_warmup_steps < 0:
            problems.append("contrastive.head_warmup_steps must be >= 0")
        elif con.contrastive_enabled and con.head_warmup_steps > run.total_steps:
            problems.append("contrastive.head_warmup_steps must not exceed run.total_steps")
        if run.prompts_per_step < 1:
            problems.append("run.prompts_per_step must be >= 1")
        if run.prompts_per_step > self.tasks.n_train:
            problems.append("run.prompts_per_step exceeds tasks.n_train")
        if self.eval.eval_every < 1:
            problems.append("eval.eval_every must be >= 1")
        if run.checkpoint_every < 1:
            problems.append("run.checkpoint_every must be >= 1")
        for name, build in (
            ("method", lambda: self.method.surrogate()),
            ("contrastive", lambda: self.contrastive.core()),
            ("tasks", lambda: self.tasks.base_family()),
            ("eval", lambda: self.eval.sampling(self.sampling.max_response_len)),
            ("run", lambda: self.run.dims()),
        ):
            try:
                build()
            except ContractError as exc:
                problems.append(f"{name}: {exc}")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            out[name] = {k: v for k, v in asdict(getattr(self, name)).items() if v is not None}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:16]


def _type_ok(value: Any, default: Any, annotation: str) -> bool:
    if isinstance(default, bool) or "bool" in annotation:
        return isinstance(value, bool)
    if "float" in annotation:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if "int" in annotation:
        return isinstance(value, int) and not isinstance(value, bool)
    if "str" in annotation:
        return isinstance(value, str)
    return True


def from_dict(data: Mapping[str, Any]) -> TrainConfig:
    """Build a resolved, validated config; every unknown or mistyped key is reported together."""
    problems = []
    sections = {}
    for sec in data:
        if sec not in SECTIONS:
            problems.append(f"unknown section [{sec}]")
    for sec, cls in SECTIONS.items():
        raw = data.get(sec, {})
        if not isinstance(raw, Mapping):
            problems.append(f"[{sec}] must be a table")
            continue
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                problems.append(f"unknown key {sec}.{key}")
                continue
            f = known[key]
            if not _type_ok(value, f.default, str(f.type)):
                problems.append(f"{sec}.{key} has the wrong type ({type(value).__name__}: {value!r})")
                continue
            if "float" in str(f.type) and isinstance(value, int):
                value = float(value)
            kwargs[key] = value
        sections[sec] = kwargs
    if problems:
        raise ConfigError(problems)
    built = {}
    for sec, cls in SECTIONS.items():
        try:
            built[sec] = cls(**sections[sec])
        except ContractError as exc:
            problems.append(f"{sec}: {exc}")
    if problems:
        raise ConfigError(problems)
    cfg = TrainConfig(**built)
    if cfg.method.method not in METHODS:
        raise ConfigError([f"method.method must be one of {METHODS}"])
    cfg.validate()
    return cfg.resolved()


def parse_override(text: str) -> tuple[str, str, Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form section.key=value"])
    path, raw = text.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError([f"override key {path!r} must be section.key"])
    sec, key = path.strip().split(".")
    raw = raw.strip()
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return sec, key, value


def apply_overrides(data: Mapping[str, Any], overrides: Iterable[str]) -> dict:
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in data.items()}
    for text in overrides:
        sec, key, value = parse_override(text)
        out.setdefault(sec, {})
        if isinstance(out[sec], dict):
            out[sec][key] = value
    return out


def load(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
    return from_dict(apply_overrides(data, overrides))


def echo(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_toml())


def method_table() -> dict[str, dict]:
    """Per-method defaults, as exposed to users."""
    return method_defaults()
