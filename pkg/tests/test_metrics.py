import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import eer_sweep
from ssl_finetune.heads import SemanticAnnotation
from ssl_finetune.metrics import (
    TrialScore,
    equal_error_rate,
    intent_accuracy,
    read_decoded,
    read_scores,
    slot_f1,
    unweighted_accuracy,
    weighted_accuracy,
    write_decoded,
    write_scores,
)


def trials(tar, non):
    out = [TrialScore(f"e{i}", f"t{i}", s, "target") for i, s in enumerate(tar)]
    out += [TrialScore(f"e{i}", f"n{i}", s, "nontarget") for i, s in enumerate(non)]
    return out


def ann(sc, ac, ents=()):
    return SemanticAnnotation(sc, ac, frozenset(ents))


class TestAccuracy:
    def test_all_correct(self):
        assert weighted_accuracy([1, 2, 3], [1, 2, 3]) == 100.0

    def test_three_of_four(self):
        assert weighted_accuracy([0, 1, 1, 1], [0, 1, 1, 0]) == 75.0

    def test_imbalanced_distinguishes_wa_from_ua(self):
        refs = ["a"] * 9 + ["b"]
        preds = ["a"] * 10
        assert weighted_accuracy(preds, refs) == 90.0
        assert unweighted_accuracy(preds, refs) == 50.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            weighted_accuracy([1], [1, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30), st.randoms())
    def test_bounded_and_permutation_invariant(self, pairs, rnd):
        p, r = zip(*pairs)
        wa = weighted_accuracy(p, r)
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        p2, r2 = zip(*shuffled)
        assert 0 <= wa <= 100
        assert wa == weighted_accuracy(p2, r2)


class TestEER:
    def test_separable(self):
        assert equal_error_rate(trials([0.9, 0.8], [0.1, 0.2])) == 0.0

    def test_interleaved_half(self):
        assert equal_error_rate(trials([0.8, 0.2], [0.7, 0.3])) == pytest.approx(50.0)

    def test_inverted_is_100(self):
        assert equal_error_rate(trials([0.1, 0.2], [0.8, 0.9])) == pytest.approx(100.0)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            equal_error_rate(trials([0.5], []))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            TrialScore("a", "b", float("nan"), "target")
        with pytest.raises(ValueError):
            TrialScore("", "b", 0.0, "target")
        with pytest.raises(ValueError):
            TrialScore("a", "b", 0.0, "maybe")

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_sweep_oracle(self, seed):
        rng = np.random.default_rng(seed)
        tar = rng.normal(1.0, 1.0, 100)
        non = rng.normal(0.0, 1.0, 100)
        assert abs(equal_error_rate(trials(tar, non)) - eer_sweep(tar, non)) <= 1e-9

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        tar = rng.integers(0, 5, 60).astype(float)
        non = rng.integers(0, 4, 60).astype(float)
        assert abs(equal_error_rate(trials(tar, non)) - eer_sweep(tar, non)) <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        tar, non = rng.normal(0.5, 1, 30), rng.normal(0, 1, 30)
        base = equal_error_rate(trials(tar, non))
        f = lambda s: np.exp(s / 3) * 4 - 7
        assert equal_error_rate(trials(f(tar), f(non))) == pytest.approx(base, abs=1e-9)

    def test_score_file_round_trip(self, tmp_path):
        ts = trials([0.25, -1.5e-7], [1 / 3])
        write_scores(tmp_path / "s.txt", ts)
        assert read_scores(tmp_path / "s.txt") == ts


class TestSLUMetrics:
    def test_identical(self):
        refs = [ann("a", "b", [("x", "1")]), ann("c", "d")]
        assert intent_accuracy(refs, refs) == 100.0
        assert slot_f1(refs, refs) == 100.0

    def test_joint_match_rule(self):
        assert intent_accuracy([ann("a", "wrong")], [ann("a", "b")]) == 0.0

    def test_two_of_five(self):
        refs = [ann("s", str(i)) for i in range(5)]
        hyps = [ann("s", "0"), ann("s", "1"), ann("s", "x"), ann("y", "3"), ann("s", "z")]
        assert intent_accuracy(hyps, refs) == 40.0

    def test_normalization(self):
        assert intent_accuracy([ann(" Calendar ", "SET")], [ann("calendar", "set")]) == 100.0

    def test_empty_hyp_entities(self):
        assert slot_f1([ann("a", "b")], [ann("a", "b", [("x", "1")])]) == 0.0

    def test_half_and_half(self):
        ref = ann("a", "b", [("date", "today"), ("place", "paris")])
        hyp = ann("a", "b", [("date", "today"), ("place", "london")])
        assert slot_f1([hyp], [ref]) == pytest.approx(50.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.frozensets(st.tuples(st.sampled_from("ab"), st.sampled_from("xyz")), max_size=3),
                              st.frozensets(st.tuples(st.sampled_from("ab"), st.sampled_from("xyz")), max_size=3)),
                    min_size=1, max_size=6))
    def test_f1_symmetric_and_bounded(self, pairs):
        hyps = [ann("s", "a", h) for h, _ in pairs]
        refs = [ann("s", "a", r) for _, r in pairs]
        f = slot_f1(hyps, refs)
        assert 0 <= f <= 100
        assert f == pytest.approx(slot_f1(refs, hyps))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            intent_accuracy([ann("a", "b")], [])
        with pytest.raises(ValueError):
            slot_f1([ann("a", "b")], [])

    def test_decoded_file_round_trip(self, tmp_path):
        rows = {"u1": "calendar|set|date=today", "u2": ""}
        write_decoded(tmp_path / "d.txt", rows)
        assert read_decoded(tmp_path / "d.txt") == rows
