"""Synthetic task environment: generation, answer extraction, verification, splits."""

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipo import tasks as tk
from clipo.errors import ContractError, GenerationError
from clipo.tasks import TOKEN_ID, TaskFamily

OPEN, CLOSE, EOS = TOKEN_ID["ANS_OPEN"], TOKEN_ID["ANS_CLOSE"], TOKEN_ID["EOS"]


class _Parser:
    """Recursive-descent evaluator over prompt tokens (expr := term (('+'|'-') term)*)."""

    def __init__(self, words):
        self.words, self.pos = words, 0

    def peek(self):
        return self.words[self.pos] if self.pos < len(self.words) else None

    def number(self):
        digits = ""
        while self.peek() is not None and self.peek().isdigit():
            digits += self.words[self.pos]
            self.pos += 1
        assert digits, f"expected a number at {self.pos}"
        return int(digits)

    def term(self):
        value = self.number()
        while self.peek() == "*":
            self.pos += 1
            value *= self.number()
        return value

    def expr(self):
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.words[self.pos]
            self.pos += 1
            value = value + self.term() if op == "+" else value - self.term()
        return value


def oracle_answer(inst):
    words = tk.decode(inst.prompt_tokens)
    cut = words.index("mod")
    value = _Parser(words[:cut]).expr()
    modulus = int("".join(words[cut + 1 : cut + 1 + len(str(inst.family.modulus))]))
    return value % modulus


class TestGenerate:
    def test_degenerate_family(self):
        fam = TaskFamily(n_operands=1, operand_max=9, modulus=10)
        for seed in range(20):
            inst = tk.generate(fam, seed)
            words = tk.decode(inst.prompt_tokens)
            assert len(words[0]) == 1 and words[1] == "mod"
            assert inst.answer == int(words[0]) % 10

    def test_deterministic(self):
        fam = TaskFamily()
        assert tk.generate(fam, 42) == tk.generate(fam, 42)

    def test_thousand_samples_match_evaluator(self):
        """Answers agree with an independent recursive-descent evaluator."""
        fam = TaskFamily(operators="+-*")
        for seed in range(1000):
            inst = tk.generate(fam, seed)
            assert inst.answer == oracle_answer(inst), tk.decode(inst.prompt_tokens)

    def test_distractors_before_prompt_end(self):
        fam = TaskFamily(distractor_clauses=2)
        words = tk.decode(tk.generate(fam, 0).prompt_tokens)
        assert words[-1] == "PROMPT_END"
        assert words.count(";") == 2
        assert words.index(";") > words.index("mod")

    def test_invalid_family(self):
        with pytest.raises(ContractError):
            TaskFamily(n_operands=0)
        with pytest.raises(ContractError):
            TaskFamily(modulus=11)

    def test_gold_solution_verifies(self):
        fam = TaskFamily(operand_max=19, operators="+-*")
        rng = random.Random(0)
        for seed in range(300):
            inst = tk.generate(fam, seed)
            assert tk.verify(inst, tk.solution_tokens(inst, rng)) == 1


def _layout_oracle(symbols):
    """Reference for extract_answer over symbolic layouts.

    O and C are the markers, digits are themselves and 'x' is any other token.
    """
    text = "".join(symbols)
    o = text.rfind("O")
    if o < 0:
        return None
    c = text.find("C", o)
    if c < 0:
        return None
    markers_before = [ch for ch in text[:o] if ch in "OC"]
    if markers_before and markers_before[-1] == "O":
        return None
    body = text[o + 1 : c]
    if not body or not body.isdigit():
        return None
    return int(body)


def _to_tokens(symbols):
    table = {"O": OPEN, "C": CLOSE, "x": TOKEN_ID["+"]}
    return [table[s] if s in table else TOKEN_ID[s] for s in symbols]


class TestExtractAnswer:
    def test_simple(self):
        assert tk.extract_answer([TOKEN_ID["1"], OPEN, TOKEN_ID["4"], TOKEN_ID["2"], CLOSE, EOS]) == 42

    def test_no_open_marker(self):
        assert tk.extract_answer([TOKEN_ID["4"], CLOSE, EOS]) is None

    def test_last_span_wins(self):
        toks = [OPEN, TOKEN_ID["7"], CLOSE, TOKEN_ID[";"], OPEN, TOKEN_ID["9"], CLOSE]
        assert tk.extract_answer(toks) == 9

    @pytest.mark.parametrize("toks", [[OPEN, CLOSE], [OPEN, TOKEN_ID["+"], CLOSE], [OPEN, OPEN, TOKEN_ID["3"], CLOSE], [OPEN, TOKEN_ID["3"]], []])
    def test_malformed(self, toks):
        assert tk.extract_answer(toks) is None

    def test_all_layouts_against_oracle(self):
        """Every layout up to six symbols over {O, C, 5, 1, x}."""
        count = 0
        for n in range(7):
            for symbols in itertools.product("OC51x", repeat=n):
                assert tk.extract_answer(_to_tokens(symbols)) == _layout_oracle(symbols), symbols
                count += 1
        assert count == sum(5**n for n in range(7))

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, tk.VOCAB_SIZE - 1), max_size=30))
    def test_never_raises(self, toks):
        out = tk.extract_answer(toks)
        assert out is None or out >= 0


class TestVerify:
    def test_correct(self):
        inst = tk.generate(TaskFamily(), 3)
        assert tk.verify(inst, [OPEN] + tk.number_tokens(inst.answer) + [CLOSE, EOS]) == 1

    def test_absent(self):
        inst = tk.generate(TaskFamily(), 3)
        assert tk.verify(inst, tk.number_tokens(inst.answer)) == 0

    def test_congruent_but_unreduced_is_wrong(self):
        """Exhaustive over residues 0..3m: only the reduced value is accepted."""
        fam = TaskFamily(n_operands=1, operand_max=9, modulus=10)
        inst = tk.generate(fam, 1)
        for value in range(3 * fam.modulus + 1):
            reward = tk.verify(inst, [OPEN] + tk.number_tokens(value) + [CLOSE])
            assert reward == int(value == inst.answer)


class TestSplits:
    def test_empty_train(self):
        train, ev = tk.make_split(TaskFamily(), 0, 30, seed=1)
        assert train == [] and len(ev) == 30

    def test_deterministic(self):
        assert tk.make_split(TaskFamily(), 50, 20, 5) == tk.make_split(TaskFamily(), 50, 20, 5)

    def test_disjoint(self):
        train, ev = tk.make_split(TaskFamily(), 500, 200, seed=9)
        assert len(train) == 500 and len(ev) == 200
        overlap = [a for a in train for b in ev if a.prompt_tokens == b.prompt_tokens]
        assert overlap == []
        assert len({i.prompt_tokens for i in train}) == 500

    def test_exhaustion(self):
        fam = TaskFamily(n_operands=1, operand_max=3, modulus=5)
        with pytest.raises(GenerationError):
            tk.make_split(fam, 10, 0, seed=0)

    def test_eval_suites_exclude_training_prompts(self):
        base = TaskFamily()
        train, _ = tk.make_split(base, 300, 0, seed=0)
        suites = tk.make_eval_suites(base, 50, seed=0, exclude=[t.prompt_tokens for t in train])
        seen = {t.prompt_tokens for t in train}
        assert set(suites) == {"base", "perturbed1", "perturbed2"}
        for insts in suites.values():
            assert len(insts) == 50
            assert not seen & {i.prompt_tokens for i in insts}
        assert max(max(i.operands) for i in suites["perturbed1"]) > base.operand_max

    def test_dump_round_trip(self, tmp_path):
        train, _ = tk.make_split(TaskFamily(distractor_clauses=1), 20, 0, seed=2)
        path = tmp_path / "tasks.jsonl"
        tk.dump_tasks(train, path)
        assert tk.load_tasks(path) == train

    def test_tampered_dump_rejected(self, tmp_path):
        train, _ = tk.make_split(TaskFamily(), 3, 0, seed=2)
        path = tmp_path / "tasks.jsonl"
        tk.dump_tasks(train, path)
        path.write_text(path.read_text().replace('"answer": ', '"answer": 1', 1))
        with pytest.raises(GenerationError):
            tk.load_tasks(path)
