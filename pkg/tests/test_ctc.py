import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kfconformer import tensor as tn
from kfconformer.ctc import (CtcPosterior, LabelSeq, argmax_frame_labels, collapse, ctc_greedy_decode,
                             ctc_loss, ctc_loss_batch, edit_distance)
from kfconformer.tensor import Tensor

from _oracles import brute_force_nll, random_posterior


def post(lp, requires_grad=False):
    return CtcPosterior(Tensor(np.asarray(lp, dtype=np.float64), requires_grad))


class TestCtcLoss:
    def test_single_path(self):
        lp = np.log([[0.5, 0.5]])
        assert ctc_loss(post(lp), LabelSeq([1])).loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_two_frames_enumerated(self):
        lp = np.log(np.full((2, 2), 0.5))
        assert brute_force_nll(lp, [1]) == pytest.approx(-math.log(0.75), abs=1e-12)
        assert ctc_loss(post(lp), LabelSeq([1])).loss.item() == pytest.approx(0.2876820724517809, abs=1e-12)

    def test_infeasible_flagged(self):
        lp = np.log([[0.2, 0.4, 0.4]])
        p = post(lp, True)
        res = ctc_loss(p, LabelSeq([1, 2]))
        assert not res.feasible and res.loss.item() == math.inf
        res.loss.backward()
        assert (p.log_probs.grad == 0).all()

    def test_repeat_needs_separator(self):
        lp = random_posterior(np.random.default_rng(0), 2, 3)
        assert not ctc_loss(post(lp), LabelSeq([1, 1])).feasible
        assert ctc_loss(post(lp), LabelSeq([1, 2])).feasible

    def test_oracle_equivalence_random(self, rng):
        for _ in range(200):
            T, V, U = int(rng.integers(1, 7)), int(rng.integers(2, 5)), int(rng.integers(0, 4))
            lp = random_posterior(rng, T, V)
            labels = rng.integers(1, V, size=U)
            res = ctc_loss(post(lp), LabelSeq(labels))
            ref = brute_force_nll(lp, labels)
            assert res.feasible == np.isfinite(ref)
            if res.feasible:
                assert abs(res.loss.item() - ref) <= 1e-8

    def test_gradient_vs_finite_differences(self, rng):
        for _ in range(10):
            T, V, U = int(rng.integers(3, 7)), int(rng.integers(2, 5)), int(rng.integers(1, 3))
            lp = Tensor(random_posterior(rng, T, V), True)
            labels = LabelSeq(rng.integers(1, V, size=U))
            ctc_loss(CtcPosterior(lp), labels).loss.backward()
            fd = np.zeros_like(lp.data)
            for idx in np.ndindex(*lp.shape):
                for sgn in (1, -1):
                    d = lp.data.copy()
                    d[idx] += sgn * 1e-5
                    fd[idx] += sgn * brute_force_nll(d, labels.ids) / 2e-5
            assert np.linalg.norm(lp.grad - fd) / np.linalg.norm(fd) <= 1e-4

    def test_batch_matches_single(self, rng):
        lps = [random_posterior(rng, t, 4) for t in (5, 3, 6)]
        labels = [(1, 2), (3,), (2, 2, 1)]
        padded = np.zeros((3, 6, 4))
        for i, lp in enumerate(lps):
            padded[i, :len(lp)] = lp
        loss, nll, ok = ctc_loss_batch(Tensor(padded), [5, 3, 6], labels)
        singles = [ctc_loss(post(lp), LabelSeq(l)).loss.item() for lp, l in zip(lps, labels)]
        np.testing.assert_allclose(nll, singles, atol=1e-10)
        assert loss.item() == pytest.approx(np.mean(singles))

    def test_batch_gradient_through_log_softmax(self, rng):
        z = Tensor(rng.normal(size=(2, 5, 3)), True)
        f = lambda: ctc_loss_batch(tn.log_softmax(z), [5, 4], [(1, 2), (2,)])[0]
        from _gradcheck import check_grads
        check_grads(f, [z])

    def test_posterior_must_be_normalised(self):
        with pytest.raises(ValueError):
            CtcPosterior(Tensor(np.zeros((2, 3))))


class TestDecoding:
    B, A, C = 0, 1, 3

    def onehot(self, ids, V=4):
        lp = np.full((len(ids), V), math.log(0.01 / (V - 1)))
        lp[np.arange(len(ids)), ids] = math.log(0.99)
        return post(lp)

    def test_collapse_and_blank_removal(self):
        assert ctc_greedy_decode(self.onehot([0, 1, 1, 0, 3])).ids == (1, 3)

    def test_all_blank(self):
        assert ctc_greedy_decode(self.onehot([0, 0, 0])).ids == ()

    def test_blank_separates_repeats(self):
        assert ctc_greedy_decode(self.onehot([1, 1, 0, 1])).ids == (1, 1)

    def test_argmax_blank_first(self):
        assert argmax_frame_labels(post(np.log([[0.9, 0.05, 0.05]]))) == [0]

    def test_argmax_tie_smallest_index(self):
        assert argmax_frame_labels(post(np.log([[0.2, 0.4, 0.4]]))) == [1]

    def test_argmax_length(self, rng):
        assert len(argmax_frame_labels(post(random_posterior(rng, 7, 3)))) == 7

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 3), max_size=20))
    def test_decode_never_emits_blank_or_run_duplicates(self, ids):
        out = collapse(ids)
        assert 0 not in out
        # a decoded repeat must come from two runs separated by a blank
        runs = [k for k, _ in itertools.groupby(ids) if k != 0]
        assert out == runs


class TestEditDistance:
    def test_equal(self):
        e = edit_distance([1, 2, 3], [1, 2, 3])
        assert e.errors == 0 and e.rate == 0

    def test_substitution(self):
        e = edit_distance([1, 2, 4], [1, 2, 3])
        assert (e.substitutions, e.insertions, e.deletions) == (1, 0, 0)

    def test_empty_hypothesis(self):
        e = edit_distance([], [1, 2])
        assert e.deletions == 2 and e.rate == 1.0

    def test_insertions(self):
        e = edit_distance([1, 5, 2], [1, 2])
        assert (e.substitutions, e.insertions, e.deletions) == (0, 1, 0)

    @settings(max_examples=150, deadline=None)
    @given(*[st.lists(st.integers(1, 3), max_size=7)] * 3)
    def test_symmetry_and_triangle(self, a, b, c):
        ab = edit_distance(a, b).errors
        assert ab == edit_distance(b, a).errors
        assert edit_distance(a, c).errors <= ab + edit_distance(b, c).errors
