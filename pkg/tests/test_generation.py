"""Tests for prompt construction and decoding."""

from types import SimpleNamespace

import numpy as np
import pytest

from minicoder import generation as gen
from minicoder.model import ModelConfig, init_parameters
from minicoder.tokenizer import (
    DESCR_ID,
    EOC_ID,
    NUM_SPECIALS,
    PYTHON_ID,
    Segment,
    Vocabulary,
    decode,
    encode,
)

BYTE_VOCAB = Vocabulary(
    subwords=tuple(bytes([i]) for i in range(256)), separate_code_space=False
)

GCD_DOC = "Return a greatest common divisor of two integers a and b"
GCD_SIG = "def greatest_common_divisor(a: int, b: int) -> int:"


def byte_ids(text: str) -> list[int]:
    return [NUM_SPECIALS + b for b in text.encode("utf-8")]


class TestPrompt:
    def test_gcd_prompt_text_and_tokens(self):
        prompt = gen.build_prompt(GCD_DOC, GCD_SIG, BYTE_VOCAB)
        assert prompt.text == f"<descr> {GCD_DOC} <python>\n{GCD_SIG}\n"
        expected_ids = (
            [DESCR_ID]
            + byte_ids(GCD_DOC)
            + [PYTHON_ID]
            + byte_ids("\n" + GCD_SIG + "\n")
        )
        assert prompt.tokens.ids == expected_ids
        segs = prompt.tokens.segments
        assert segs[0] == Segment.SPECIAL
        doc_end = 1 + len(GCD_DOC.encode())
        assert set(segs[1:doc_end]) == {Segment.DESCR}
        assert segs[doc_end] == Segment.SPECIAL
        assert set(segs[doc_end + 1 :]) == {Segment.CODE}

    def test_docstring_whitespace_is_normalized(self):
        prompt = gen.build_prompt("Add\n    one  to\tx.", "def f(x):", BYTE_VOCAB)
        assert prompt.docstring == "Add one to x."
        assert prompt.text == "<descr> Add one to x. <python>\ndef f(x):\n"

    def test_strip_tests_removes_examples(self):
        doc = "Add one.\n>>> f(1)\n2\nf(3) == 4"
        prompt = gen.build_prompt(doc, "def f(x):", BYTE_VOCAB, strip_tests=True)
        assert prompt.docstring == "Add one."

    def test_strip_types_rewrites_signature(self):
        prompt = gen.build_prompt("Add one.", GCD_SIG, BYTE_VOCAB, strip_types=True)
        assert prompt.signature == "def greatest_common_divisor(a, b):"
        assert prompt.text.endswith("\ndef greatest_common_divisor(a, b):\n")

    def test_strip_types_handles_varargs_and_defaults(self):
        sig = "def f(a: int, *args: str, b: float = 1.0, **kw: int) -> list[int]:"
        assert gen.strip_type_hints(sig) == "def f(a, *args, b=1.0, **kw):"

    def test_prompt_tokens_decode_back(self):
        prompt = gen.build_prompt(GCD_DOC, GCD_SIG, BYTE_VOCAB)
        pairs = list(zip(prompt.tokens.ids, prompt.tokens.segments))
        descr_part = [i for i, s in pairs if s == Segment.DESCR]
        code_part = [i for i, s in pairs if s == Segment.CODE]
        assert decode(descr_part, BYTE_VOCAB) == GCD_DOC
        assert decode(code_part, BYTE_VOCAB) == "\n" + GCD_SIG + "\n"


class TestDecodeConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="strategy"):
            gen.DecodeConfig(strategy="beam")
        with pytest.raises(ValueError, match="temperature"):
            gen.DecodeConfig(temperature=0.0)
        with pytest.raises(ValueError, match="top_p"):
            gen.DecodeConfig(top_p=0.0)
        with pytest.raises(ValueError, match="top_p"):
            gen.DecodeConfig(top_p=1.5)

    def test_presets(self):
        focused = gen.PRESETS["focused"]
        diverse = gen.PRESETS["diverse"]
        assert (focused.temperature, focused.top_p) == (0.2, 0.4)
        assert (diverse.temperature, diverse.top_p) == (0.95, 0.8)
        assert focused.strategy == diverse.strategy == "sample"


class TestSamplingDistribution:
    def test_nucleus_prefix_by_probability(self):
        logits = np.log(np.array([4.0, 2.0, 1.0, 1.0]))
        cases = {0.45: [0], 0.6: [0, 1], 0.8: [0, 1, 2], 1.0: [0, 1, 2, 3]}
        for top_p, expected in cases.items():
            cfg = gen.DecodeConfig(strategy="sample", top_p=top_p)
            support, kept = gen.sampling_distribution(logits, cfg)
            assert support.tolist() == expected
            assert kept.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(kept > 0)

    def test_ties_resolved_toward_lower_ids(self):
        logits = np.zeros(4)
        cfg = gen.DecodeConfig(strategy="sample", top_p=0.5)
        support, kept = gen.sampling_distribution(logits, cfg)
        assert support.tolist() == [0, 1]
        assert kept.tolist() == [0.5, 0.5]

    def test_temperature_reshapes_support(self):
        logits = np.array([2.0, 1.0, 0.0])
        sharp = gen.DecodeConfig(strategy="sample", temperature=0.2, top_p=0.9)
        flat = gen.DecodeConfig(strategy="sample", temperature=10.0, top_p=0.9)
        support_sharp, _ = gen.sampling_distribution(logits, sharp)
        support_flat, _ = gen.sampling_distribution(logits, flat)
        assert support_sharp.tolist() == [0]
        assert support_flat.tolist() == [0, 1, 2]

    def test_support_is_minimal_prefix(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            logits = rng.normal(size=32)
            top_p = float(rng.uniform(0.05, 1.0))
            cfg = gen.DecodeConfig(strategy="sample", top_p=top_p, temperature=0.9)
            support, kept = gen.sampling_distribution(logits, cfg)
            z = (logits / 0.9).astype(np.float64)
            p = np.exp(z - z.max())
            p /= p.sum()
            mass = p[support].sum()
            assert mass >= top_p - 1e-12
            assert mass - p[support[-1]] < top_p
            assert kept.sum() == pytest.approx(1.0, abs=1e-12)


class TestSampleStep:
    def test_greedy_tie_picks_lowest_id(self):
        logits = np.array([1.0, 3.0, 3.0, 2.0])
        cfg = gen.DecodeConfig(strategy="greedy")
        rng = np.random.default_rng(0)
        assert gen._sample_step(logits, cfg, rng) == 1

    def test_vanishing_temperature_matches_greedy(self):
        rng = np.random.default_rng(5)
        cfg = gen.DecodeConfig(strategy="sample", temperature=1e-6, top_p=1.0)
        for _ in range(200):
            logits = rng.normal(size=40)
            token = gen._sample_step(logits, cfg, np.random.default_rng(3))
            assert token == int(np.argmax(logits))

    def test_samples_stay_in_support(self):
        rng = np.random.default_rng(7)
        cfg = gen.DecodeConfig(strategy="sample", temperature=0.8, top_p=0.6)
        logits = rng.normal(size=16)
        support, _ = gen.sampling_distribution(logits, cfg)
        for seed in range(100):
            token = gen._sample_step(logits, cfg, np.random.default_rng(seed))
            assert token in support


def scripted_forward(script):
    """Forward stand-in emitting one-hot logits from a step-indexed script."""

    def fake(params, cfg, ids):
        step = len(ids) - fake.prompt_len
        logits = np.zeros((len(ids), fake.n_vocab))
        logits[-1, script[min(step, len(script) - 1)]] = 10.0
        return SimpleNamespace(logits=logits)

    fake.n_vocab = 261
    fake.prompt_len = 0
    return fake


class TestGenerate:
    def setup_method(self):
        self.cfg = ModelConfig(
            n_layers=1, d_model=8, d_ff=16, n_heads=2, n_cntx=64, n_vocab=261, seed=0
        )
        self.prompt = gen.build_prompt("Add one.", "def f(x):", BYTE_VOCAB)
        self.decode_cfg = gen.DecodeConfig(strategy="greedy", max_new_tokens=16)

    def test_stops_at_end_of_code(self, monkeypatch):
        script = byte_ids("ret") + [EOC_ID]
        fake = scripted_forward(script)
        fake.prompt_len = len(self.prompt.tokens.ids)
        monkeypatch.setattr(gen, "forward", fake)
        result = gen.generate(
            None, self.cfg, BYTE_VOCAB, self.prompt, self.decode_cfg
        )
        assert result.stop_reason == gen.STOP_EOC
        assert result.stopped_at_eoc
        assert result.completion == "ret"
        assert result.new_ids == script

    def test_completion_never_contains_markers(self, monkeypatch):
        script = [PYTHON_ID, DESCR_ID] + byte_ids("x") + [EOC_ID]
        fake = scripted_forward(script)
        fake.prompt_len = len(self.prompt.tokens.ids)
        monkeypatch.setattr(gen, "forward", fake)
        result = gen.generate(None, self.cfg, BYTE_VOCAB, self.prompt, self.decode_cfg)
        assert result.completion == "x"
        for marker in ("<descr>", "<python>", "<eoc>"):
            assert marker not in result.completion

    def test_stops_at_token_budget(self, monkeypatch):
        fake = scripted_forward(byte_ids("a"))
        fake.prompt_len = len(self.prompt.tokens.ids)
        monkeypatch.setattr(gen, "forward", fake)
        cfg = gen.DecodeConfig(strategy="greedy", max_new_tokens=5)
        result = gen.generate(None, self.cfg, BYTE_VOCAB, self.prompt, cfg)
        assert result.stop_reason == gen.STOP_LENGTH
        assert result.completion == "aaaaa"

    def test_stops_at_context_boundary(self, monkeypatch):
        fake = scripted_forward(byte_ids("a"))
        fake.prompt_len = len(self.prompt.tokens.ids)
        monkeypatch.setattr(gen, "forward", fake)
        room = self.cfg.n_cntx - len(self.prompt.tokens.ids)
        cfg = gen.DecodeConfig(strategy="greedy", max_new_tokens=room + 50)
        result = gen.generate(None, self.cfg, BYTE_VOCAB, self.prompt, cfg)
        assert result.stop_reason == gen.STOP_CONTEXT
        assert len(result.new_ids) == room

    def test_full_prompt_yields_empty_completion(self):
        long_doc = "w " * 200
        prompt = gen.build_prompt(long_doc, "def f(x):", BYTE_VOCAB)
        assert len(prompt.tokens.ids) >= self.cfg.n_cntx
        result = gen.generate(
            init_parameters(self.cfg), self.cfg, BYTE_VOCAB, prompt, self.decode_cfg
        )
        assert result == gen.GenerationResult(
            completion="", new_ids=[], stop_reason=gen.STOP_CONTEXT
        )

    def test_sampling_is_seed_deterministic(self):
        params = init_parameters(self.cfg)
        cfg = gen.DecodeConfig(
            strategy="sample", temperature=0.9, top_p=0.8, max_new_tokens=8, seed=3
        )
        first = gen.generate(params, self.cfg, BYTE_VOCAB, self.prompt, cfg)
        second = gen.generate(params, self.cfg, BYTE_VOCAB, self.prompt, cfg)
        assert first.new_ids == second.new_ids
        assert first.completion == second.completion

    def test_trace_reports_each_step(self):
        params = init_parameters(self.cfg)
        cfg = gen.DecodeConfig(
            strategy="sample", temperature=0.9, top_p=0.7, max_new_tokens=6, seed=1
        )
        records = []
        result = gen.generate(
            params, self.cfg, BYTE_VOCAB, self.prompt, cfg, trace=records.append
        )
        assert len(records) == len(result.new_ids)
        for record, token in zip(records, result.new_ids):
            assert record["chosen"] == token
            assert token in record["support"]
            assert record["probs"].sum() == pytest.approx(1.0, abs=1e-12)


class TestNextTokenDistribution:
    def test_raw_softmax_and_truncated_agree_on_support(self):
        cfg = ModelConfig(
            n_layers=1, d_model=8, d_ff=16, n_heads=2, n_cntx=16, n_vocab=261, seed=2
        )
        params = init_parameters(cfg)
        ids = np.array(byte_ids("abc"), dtype=np.int64)
        raw = gen.next_token_distribution(params, cfg, ids)
        assert raw.shape == (cfg.n_vocab,)
        assert raw.sum() == pytest.approx(1.0, abs=1e-9)
        decode_cfg = gen.DecodeConfig(strategy="sample", temperature=1.0, top_p=0.5)
        truncated = gen.next_token_distribution(params, cfg, ids, decode_cfg)
        support = np.nonzero(truncated)[0]
        assert truncated.sum() == pytest.approx(1.0, abs=1e-9)
        assert raw[support].sum() >= 0.5 - 1e-9
