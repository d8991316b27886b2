"""Synthetic modular-arithmetic tasks with a rule-based verifier.

A prompt spells an expression such as ``3 + 4 * 5 mod 7`` followed by
``PROMPT_END``. A gold response works the expression out step by step
(``4 * 5 = 6 ; 3 + 6 = 2 ;``) and closes with ``ANS_OPEN 2 ANS_CLOSE EOS``.
Only the final marked answer is ever checked.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, GenerationError

DIGITS = [str(d) for d in range(10)]
TOKENS = DIGITS + ["+", "-", "*", "mod", "=", ";", "PROMPT_END", "ANS_OPEN", "ANS_CLOSE", "EOS", "PAD"]
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)

PLUS, MINUS, TIMES, MOD = TOKEN_ID["+"], TOKEN_ID["-"], TOKEN_ID["*"], TOKEN_ID["mod"]
EQUALS, SEP = TOKEN_ID["="], TOKEN_ID[";"]
PROMPT_END, ANS_OPEN, ANS_CLOSE = TOKEN_ID["PROMPT_END"], TOKEN_ID["ANS_OPEN"], TOKEN_ID["ANS_CLOSE"]
EOS, PAD = TOKEN_ID["EOS"], TOKEN_ID["PAD"]

_OP_TOKEN = {"+": PLUS, "-": MINUS, "*": TIMES}


def vocab_hash() -> str:
    return hashlib.sha256(" ".join(TOKENS).encode()).hexdigest()[:16]


def encode(words: Iterable[str]) -> list[int]:
    return [TOKEN_ID[w] for w in words]


def decode(ids: Iterable[int]) -> list[str]:
    return [TOKENS[i] for i in ids]


def number_tokens(n: int) -> list[int]:
    return [TOKEN_ID[c] for c in str(n)]


@dataclass(frozen=True)
class TaskFamily:
    n_operands: int = 3
    operand_max: int = 9
    modulus: int = 7
    distractor_clauses: int = 0
    label: str = "base"
    operators: str = "+*"

    def __post_init__(self):
        if self.n_operands < 1:
            raise ContractError("n_operands must be >= 1")
        if self.operand_max < 0 or self.modulus < 2:
            raise ContractError(f"invalid family {self}")
        if self.modulus > 10:
            raise ContractError("residues must be single digits (modulus <= 10)")
        if not self.operators or set(self.operators) - set(_OP_TOKEN):
            raise ContractError(f"operators must be drawn from '+-*', got {self.operators!r}")

    @property
    def key(self) -> str:
        return f"{self.label}:{self.n_operands}:{self.operand_max}:{self.modulus}:{self.distractor_clauses}:{self.operators}"


def perturbed_families(base: TaskFamily, operand_max: int | None = None, distractors: int = 2) -> dict[str, TaskFamily]:
    """Base family plus its two shifted variants.

    ``perturbed1`` widens the operand range (multi-digit operands never seen in
    the warm-up corpus); ``perturbed2`` inserts distractor clauses.
    """
    return {
        "base": base,
        "perturbed1": replace(base, operand_max=operand_max or 2 * base.operand_max + 1, label="perturbed-1"),
        "perturbed2": replace(base, distractor_clauses=distractors, label="perturbed-2"),
    }


@dataclass(frozen=True)
class TaskInstance:
    prompt_tokens: tuple[int, ...]
    answer: int
    family: TaskFamily
    seed: int
    operands: tuple[int, ...] = ()
    ops: tuple[str, ...] = ()

    @property
    def family_id(self) -> str:
        return self.family.label


def evaluate_expression(operands: Sequence[int], ops: Sequence[str], modulus: int) -> int:
    """Value of ``operands`` joined by ``ops`` with ``*`` binding tighter, reduced mod ``modulus``."""
    total = 0
    sign = 1
    term = operands[0]
    for op, val in zip(ops, operands[1:]):
        if op == "*":
            term *= val
        else:
            total += sign * term
            sign = 1 if op == "+" else -1
            term = val
    total += sign * term
    return total % modulus


def generate(family: TaskFamily, seed: int) -> TaskInstance:
    rng = random.Random(f"{family.key}|{seed}")
    operands = tuple(rng.randint(0, family.operand_max) for _ in range(family.n_operands))
    ops = tuple(rng.choice(family.operators) for _ in range(family.n_operands - 1))
    prompt = number_tokens(operands[0])
    for op, val in zip(ops, operands[1:]):
        prompt += [_OP_TOKEN[op]] + number_tokens(val)
    prompt += [MOD] + number_tokens(family.modulus)
    for _ in range(family.distractor_clauses):
        prompt += [SEP] + number_tokens(rng.randint(0, family.operand_max))
    prompt.append(PROMPT_END)
    answer = evaluate_expression(operands, ops, family.modulus)
    return TaskInstance(tuple(prompt), answer, family, seed, operands, ops)


def solution_tokens(instance: TaskInstance, rng: random.Random | None = None) -> list[int]:
    """A gold scratchpad response; ``rng`` randomizes operand order of commutative steps."""
    m = instance.family.modulus
    operands, ops = instance.operands, instance.ops
    out: list[int] = []

    def step(x: int, op: str, y: int) -> int:
        if op != "-" and rng is not None and rng.random() < 0.5:
            x, y = y, x
        z = (x * y if op == "*" else x + y if op == "+" else x - y) % m
        out.extend(number_tokens(x) + [_OP_TOKEN[op]] + number_tokens(y) + [EQUALS] + number_tokens(z) + [SEP])
        return z

    # products first, then additive terms left to right
    terms: list[int] = []
    signs: list[str] = []
    cur = operands[0]
    for op, val in zip(ops, operands[1:]):
        if op == "*":
            cur = step(cur, "*", val)
        else:
            terms.append(cur)
            signs.append(op)
            cur = val
    terms.append(cur)
    acc = terms[0]
    for op, t in zip(signs, terms[1:]):
        acc = step(acc, op, t)
    final = acc % m
    out += [ANS_OPEN] + number_tokens(final) + [ANS_CLOSE, EOS]
    return out


def extract_answer(response_tokens: Sequence[int]) -> int | None:
    """Integer inside the last ``ANS_OPEN ... ANS_CLOSE`` span, or ``None``.

    The span must hold at least one digit and nothing else, must be closed,
    and must not sit inside an earlier unclosed span.
    """
    toks = list(response_tokens)
    markers = [(i, t) for i, t in enumerate(toks) if t in (ANS_OPEN, ANS_CLOSE)]
    last_open = None
    for k, (_, t) in enumerate(markers):
        if t == ANS_OPEN:
            last_open = k
    if last_open is None or last_open + 1 >= len(markers):
        return None
    if last_open > 0 and markers[last_open - 1][1] == ANS_OPEN:
        return None
    start, end = markers[last_open][0], markers[last_open + 1][0]
    body = toks[start + 1 : end]
    if not body or any(t > 9 for t in body):
        return None
    return int("".join(TOKENS[t] for t in body))


def verify(instance: TaskInstance, response_tokens: Sequence[int]) -> int:
    answer = extract_answer(response_tokens)
    return int(answer is not None and answer == instance.answer % instance.family.modulus)


def make_split(
    family: TaskFamily,
    n_train: int,
    n_eval: int,
    seed: int,
    exclude: Iterable[Sequence[int]] = (),
) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Deterministic, prompt-disjoint train/eval sets.

    The eval set is drawn first from its own seed stream, so it does not depend
    on ``n_train``. Prompts in ``exclude`` never appear in either set.
    """
    seen = {tuple(p) for p in exclude}

    def draw(n: int, stream: str) -> list[TaskInstance]:
        out = []
        budget = 50 * n + 100
        k = 0
        while len(out) < n:
            if k >= budget:
                raise GenerationError(f"could not find {n} distinct prompts for {family.key}")
            inst = generate(family, _derive_seed(seed, stream, k))
            k += 1
            if inst.prompt_tokens in seen:
                continue
            seen.add(inst.prompt_tokens)
            out.append(inst)
        return out

    eval_set = draw(n_eval, "eval")
    train_set = draw(n_train, "train")
    return train_set, eval_set


def _derive_seed(seed: int, stream: str, k: int) -> int:
    digest = hashlib.sha256(f"{seed}/{stream}/{k}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_eval_suites(
    base: TaskFamily,
    n_eval: int,
    seed: int,
    exclude: Iterable[Sequence[int]] = (),
    perturbed_operand_max: int | None = None,
    distractors: int = 2,
) -> dict[str, list[TaskInstance]]:
    families = perturbed_families(base, operand_max=perturbed_operand_max, distractors=distractors)
    exclude = [tuple(p) for p in exclude]
    suites = {}
    for name, fam in families.items():
        _, suites[name] = make_split(fam, 0, n_eval, seed + 7919 * (1 + list(families).index(name)), exclude)
    return suites


# ---------------------------------------------------------------- task dumps


def dump_tasks(instances: Iterable[TaskInstance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            rec = {
                "family": asdict(inst.family),
                "seed": inst.seed,
                "prompt_token_ids": list(inst.prompt_tokens),
                "answer": inst.answer,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_tasks(path: str | Path) -> list[TaskInstance]:
    """Rebuild instances from a dump; each record is regenerated and cross-checked."""
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            inst = generate(TaskFamily(**rec["family"]), rec["seed"])
            if list(inst.prompt_tokens) != rec["prompt_token_ids"] or inst.answer != rec["answer"]:
                raise GenerationError(f"{path}:{line_no}: record does not match its generator")
            out.append(inst)
    return out
