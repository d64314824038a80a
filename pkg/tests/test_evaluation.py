import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskvoice import evaluation as ev
from deskvoice.dsp import SAMPLE_RATE, Waveform
from deskvoice.errors import ContractError, ParameterError


def oracle_distance(ref, hyp):
    """Exhaustive-recursion Levenshtein, usable only for tiny inputs."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        oracle_distance(ref[1:], hyp) + 1,
        oracle_distance(ref, hyp[1:]) + 1,
        oracle_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
    )


class TestNormalizeText:
    def test_numerals_expand_to_digit_words(self):
        assert ev.normalize_text("Ab 12 Cd.") == "ab one two cd"

    def test_already_normalized_unchanged(self):
        s = "ab one two cd"
        assert ev.normalize_text(s) == s

    def test_empty(self):
        assert ev.normalize_text("") == ""

    def test_period_stripped(self):
        assert ev.normalize_text("abc.") == "abc"

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet="abcdefghijklmnop0123456789. !?,", max_size=40))
    def test_idempotent(self, s):
        once = ev.normalize_text(s)
        assert ev.normalize_text(once) == once


class TestEditDistance:
    def test_equal_sequences(self):
        dist, counts = ev.edit_distance(list("abc"), list("abc"))
        assert dist == 0
        assert counts == {"ins": 0, "del": 0, "sub": 0}

    def test_single_substitution(self):
        r = ev.wer("a b c", "a x c")
        assert r.rate == pytest.approx(1 / 3)
        assert (r.ins, r.dels, r.subs) == (0, 0, 1)

    def test_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(42)
        alphabet = list("abcd")
        for _ in range(200):
            ref = [alphabet[i] for i in rng.integers(0, 4, rng.integers(0, 7))]
            hyp = [alphabet[i] for i in rng.integers(0, 4, rng.integers(0, 7))]
            dist, counts = ev.edit_distance(ref, hyp)
            assert dist == oracle_distance(ref, hyp)
            assert counts["ins"] + counts["del"] + counts["sub"] == dist

    def test_one_deletion_rate_exact(self):
        ref = "a b c d e"
        hyp = "a b d e"
        r = ev.wer(ref, hyp)
        assert r.rate == 1 / 5
        assert r.dels == 1

    def test_empty_ref_rejected(self):
        with pytest.raises(ContractError):
            ev.cer("", "abc")
        with pytest.raises(ContractError):
            ev.cer(".", "abc")  # empty after normalization too


class TestCer:
    def test_digit_words_and_digits_are_one_symbol(self):
        # "12" in the hypothesis normalizes to the same two digit words
        r = ev.cer("ab one two", "ab 12")
        assert r.rate == 0.0

    def test_tolerates_junk_hypothesis(self):
        r = ev.cer("ab", "zz&&")
        assert r.rate > 0
        assert np.isfinite(r.rate)

    def test_corpus_pooling(self):
        pairs = [("ab", "ab"), ("cd", "cx")]
        r = ev.corpus_cer(pairs)
        assert r.rate == pytest.approx(1 / 4)
        assert r.ref_len == 4

    def test_corpus_empty_rejected(self):
        with pytest.raises(ContractError):
            ev.corpus_cer([])


def _clip(seconds):
    n = int(seconds * SAMPLE_RATE)
    return Waveform(np.zeros(n, dtype=np.float32), SAMPLE_RATE)


class TestRtfBench:
    def test_planted_cost(self):
        # model sleeps 10 ms per clip; clips are 1 s, so rtf should be near 0.01
        clips = [_clip(1.0) for _ in range(10)]
        out = ev.rtf_bench(lambda c: time.sleep(0.01), clips)
        assert 0.005 < out["rtf"] < 0.05
        assert out["audio_seconds"] == pytest.approx(10.0)

    def test_latency_uses_long_clips(self):
        clips = [_clip(1.0) for _ in range(9)] + [_clip(10.0)]
        out = ev.rtf_bench(lambda c: time.sleep(0.002), clips)
        assert out["latency_10s"] > 0

    def test_too_few_clips_rejected(self):
        with pytest.raises(ParameterError):
            ev.rtf_bench(lambda c: None, [_clip(1.0)] * 3)


class TestSimilarity:
    def test_identical_embeddings(self):
        w = _clip(1.0)
        emb = lambda wav: np.array([1.0, 2.0, 3.0])
        assert ev.speaker_similarity(w, w, emb) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_embeddings(self):
        calls = iter([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert ev.speaker_similarity(None, None, lambda w: next(calls)) == pytest.approx(0.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ParameterError):
            ev.cosine(np.zeros(4), np.ones(4))


class TestReports:
    def test_digest_stable_under_key_order(self):
        a = ev.config_digest({"x": 1, "y": 2})
        b = ev.config_digest({"y": 2, "x": 1})
        assert a == b

    def test_non_finite_value_rejected(self):
        with pytest.raises(ContractError):
            ev.make_report("bad", float("nan"))

    def test_strip_wall_clock_removes_timing(self):
        rep = {"metric": "m", "value": 1.0, "wall_clock": "now",
               "nested": {"rtf": 0.5, "keep": 2}}
        out = ev.strip_wall_clock(rep)
        assert "wall_clock" not in out
        assert out["nested"] == {"keep": 2}

    def test_identical_seeds_identical_reports(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            return ev.make_report("toy", float(rng.random()),
                                  config={"seed": seed})
        a = ev.strip_wall_clock(run(7))
        b = ev.strip_wall_clock(run(7))
        assert a == b

    def test_format_table_aligns(self):
        rows = [{"name": "a", "cer": 0.25}, {"name": "long-name", "cer": 1.0}]
        text = ev.format_table(rows, ["name", "cer"])
        lines = text.splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("name")


class TestEmotionControlEval:
    def test_perfect_synthesizer_scores_one(self):
        table = ev.emotion_control_eval(
            synth_fn=lambda emo, w, i, s: emo,
            classify_fn=lambda w: w,
            emotions=["neutral", "happy"], per_emotion_n=3, seeds=(0, 1))
        for emo in ("neutral", "happy"):
            assert table["per_emotion"][emo]["with"]["mean"] == 1.0

    def test_instruction_flag_reaches_synth(self):
        seen = []
        ev.emotion_control_eval(
            synth_fn=lambda emo, w, i, s: seen.append(w) or "x",
            classify_fn=lambda w: "x",
            emotions=["happy"], per_emotion_n=1, seeds=(0,))
        assert True in seen and False in seen
