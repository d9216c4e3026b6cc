import numpy as np
import pytest

from sslasr.ctc import (
    NBestEntry,
    NBestList,
    PosteriorStream,
    TokenVocab,
    UnsatisfiableTargetError,
    ctc_forward_score,
    ctc_loss,
    greedy_decode,
    prefix_beam_nbest,
)
from sslasr.nn import log_softmax, log_softmax_backward

from gradcheck import array_grad_check
from oracles import ctc_score_by_enumeration, labelings_by_enumeration


def random_logp(t, v, rng):
    logits = rng.normal(size=(t, v + 1))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


class TestTokenVocab:
    def test_ids_start_at_one(self):
        vocab = TokenVocab(("a", "b"))
        assert vocab.blank_id == 0
        assert vocab.id_of("a") == 1
        assert vocab.token_of(2) == "b"
        assert vocab.width == 3

    def test_duplicate_symbols_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            TokenVocab(("a", "a"))

    def test_unknown_token(self):
        with pytest.raises(KeyError):
            TokenVocab(("a",)).id_of("z")


class TestPosteriorStream:
    def test_rows_must_normalize(self):
        bad = np.log(np.full((2, 3), 0.5))
        with pytest.raises(ValueError, match="log-sum-exp"):
            PosteriorStream(bad, 10_000, "x")

    def test_neg_inf_allowed(self):
        row = np.array([[0.0, -np.inf, -np.inf]])
        s = PosteriorStream(row, 10_000, "x")
        assert s.n_frames == 1


class TestCtcLoss:
    def test_single_frame_single_token(self):
        rng = np.random.default_rng(0)
        logp = random_logp(1, 3, rng)
        res = ctc_loss(logp, [2])
        assert res.value == pytest.approx(-logp[0, 2], abs=1e-12)

    def test_two_frames_one_token_three_paths(self):
        rng = np.random.default_rng(1)
        logp = random_logp(2, 2, rng)
        p = np.exp(logp)
        expected = -np.log(
            p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1]
        )
        assert ctc_loss(logp, [1]).value == pytest.approx(expected, abs=1e-12)

    def test_repeat_needs_three_frames(self):
        rng = np.random.default_rng(2)
        with pytest.raises(UnsatisfiableTargetError):
            ctc_loss(random_logp(2, 2, rng), [1, 1])

    def test_target_longer_than_frames(self):
        rng = np.random.default_rng(3)
        with pytest.raises(UnsatisfiableTargetError):
            ctc_loss(random_logp(2, 2, rng), [1, 2, 1])

    def test_out_of_vocab_target(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError, match="lexical range"):
            ctc_loss(random_logp(3, 2, rng), [3])

    def test_gradient_matches_finite_differences_on_logits(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(6, 4))
        target = [1, 2, 1]

        def loss():
            return ctc_loss(log_softmax(logits, axis=-1), target).value

        logp = log_softmax(logits, axis=-1)
        res = ctc_loss(logp, target)
        grad_logits = log_softmax_backward(logp, res.grad_logp, axis=-1)
        worst = array_grad_check(loss, logits, grad_logits, n_coords=24 * 4, h=1e-5)
        assert worst <= 1e-4


class TestForwardScore:
    def test_empty_labeling_is_blank_path(self):
        rng = np.random.default_rng(6)
        logp = random_logp(4, 2, rng)
        assert ctc_forward_score(logp, []) == pytest.approx(-logp[:, 0].sum(), abs=1e-12)

    def test_equals_loss_value(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            t, v = int(rng.integers(2, 6)), int(rng.integers(1, 4))
            logp = random_logp(t, v, rng)
            target = list(rng.integers(1, v + 1, size=rng.integers(0, t + 1)))
            try:
                loss = ctc_loss(logp, target).value
            except UnsatisfiableTargetError:
                with pytest.raises(UnsatisfiableTargetError):
                    ctc_forward_score(logp, target)
                continue
            assert ctc_forward_score(logp, target) == pytest.approx(loss, abs=1e-12)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            t, v = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            logp = random_logp(t, v, rng)
            target = list(rng.integers(1, v + 1, size=rng.integers(0, min(t, 3) + 1)))
            expected = ctc_score_by_enumeration(logp, target)
            if np.isinf(expected):
                with pytest.raises(UnsatisfiableTargetError):
                    ctc_forward_score(logp, target)
            else:
                assert ctc_forward_score(logp, target) == pytest.approx(expected, abs=1e-9)


class TestGreedyDecode:
    def test_blank_dominant_empty(self):
        logp = np.log(np.array([[0.8, 0.1, 0.1]] * 5))
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        assert greedy_decode(logp) == []

    def test_collapse_rule(self):
        # frame argmaxes: a a blank a -> [a, a]
        rows = np.array([
            [0.1, 0.8, 0.1],
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
        ])
        logp = np.log(rows / rows.sum(axis=1, keepdims=True))
        assert greedy_decode(logp) == [1, 1]

    def test_ties_break_low(self):
        logp = np.log(np.full((1, 3), 1 / 3))
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        assert greedy_decode(logp) == []  # blank wins the tie at index 0


class TestPrefixBeam:
    vocab = TokenVocab(("a", "b"))

    def test_matches_enumeration_with_wide_beam(self):
        rng = np.random.default_rng(9)
        for _ in range(8):
            logp = random_logp(4, 2, rng)
            oracle = labelings_by_enumeration(logp)
            nb = prefix_beam_nbest(logp, self.vocab, beam=400, n=5, utt_id="u")
            assert nb.is_sorted()
            for entry, (lab, lp) in zip(nb.entries, oracle[:5]):
                assert tuple(self.vocab.ids_of(entry.tokens)) == lab
                assert entry.combined_cost == pytest.approx(-lp, abs=1e-9)

    def test_dominant_path_equals_greedy(self):
        rows = np.array([
            [0.02, 0.96, 0.02],
            [0.96, 0.02, 0.02],
            [0.02, 0.02, 0.96],
        ])
        logp = np.log(rows / rows.sum(axis=1, keepdims=True))
        nb = prefix_beam_nbest(logp, self.vocab, beam=8, n=1)
        assert self.vocab.ids_of(nb.entries[0].tokens) == greedy_decode(logp)

    def test_blank_only_stream(self):
        rows = np.array([[0.9, 0.05, 0.05]] * 4)
        logp = np.log(rows / rows.sum(axis=1, keepdims=True))
        nb = prefix_beam_nbest(logp, self.vocab, beam=6, n=1)
        assert nb.entries[0].tokens == []
        assert nb.entries[0].combined_cost == pytest.approx(-logp[:, 0].sum(), abs=1e-12)

    def test_costs_non_decreasing_and_beam_monotone(self):
        rng = np.random.default_rng(10)
        for _ in range(6):
            logp = random_logp(5, 2, rng)
            best_costs = []
            for beam in (1, 2, 4, 8, 32):
                nb = prefix_beam_nbest(logp, self.vocab, beam=beam, n=1)
                best_costs.append(nb.entries[0].combined_cost)
            assert all(b <= a + 1e-12 for a, b in zip(best_costs, best_costs[1:]))
            nb = prefix_beam_nbest(logp, self.vocab, beam=32, n=10)
            costs = [e.combined_cost for e in nb.entries]
            assert costs == sorted(costs)

    def test_beam_validation(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError, match="beam >= n >= 1"):
            prefix_beam_nbest(random_logp(3, 2, rng), self.vocab, beam=2, n=3)


class TestNBestJson:
    def test_round_trip(self):
        nb = NBestList("u1", [
            NBestEntry(["a", "b"], ["word"], {"tdnn": 1.5, "w2v": float("inf")}, 1.5),
            NBestEntry([], [], {"tdnn": 2.0}, 2.0),
        ])
        back = NBestList.from_json(nb.to_json())
        assert back.utt_id == "u1"
        assert back.entries[0].tokens == ["a", "b"]
        assert back.entries[0].cost_per_system["w2v"] == float("inf")
        assert back.entries[1].combined_cost == 2.0
