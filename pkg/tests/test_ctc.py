import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import path_sums, random_frame_probs
from scenetext import ctc
from scenetext.errors import InfeasibleTarget, NoMatch, ParseError, RejectedInput


def test_collapse_examples():
    assert ctc.collapse([0, 0, 0]) == []
    assert ctc.collapse([1, 1, 0, 1, 2]) == [1, 1, 2]
    assert ctc.collapse([1, 0, 0, 1]) == [1, 1]


@given(st.lists(st.integers(1, 4), max_size=8))
def test_collapse_fixes_repeat_free_sequences(seq):
    clean = [k for i, k in enumerate(seq) if i == 0 or k != seq[i - 1]]
    assert ctc.collapse(clean) == clean


def test_loss_single_frame():
    probs = np.array([[0.4, 0.6]])
    loss, _, _ = ctc.ctc_loss(probs, [1])
    assert loss == pytest.approx(-math.log(0.6), abs=1e-15)


def test_loss_uniform_two_frames():
    probs = np.full((2, 3), 1 / 3)
    loss, _, _ = ctc.ctc_loss(probs, [1])
    assert loss == pytest.approx(math.log(3), abs=1e-14)


def test_infeasible_target_signals_infinity():
    probs = np.full((2, 2), 0.5)
    loss, la, lb = ctc.ctc_loss(probs, [1, 1])
    assert loss == np.inf and la is None and lb is None
    assert ctc.min_frames([1, 1]) == 3
    with pytest.raises(InfeasibleTarget):
        ctc.ctc_gradient(probs, [1, 1])


def test_rejects_blank_in_target_and_bad_rows():
    with pytest.raises(RejectedInput):
        ctc.ctc_loss(np.full((2, 2), 0.5), [0])
    with pytest.raises(RejectedInput):
        ctc.ctc_loss(np.array([[0.5, 0.6]]), [1])


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    probs = random_frame_probs(rng, 5, 3)
    sums = path_sums(probs)
    for target in [(), (1,), (2, 1), (1, 1), (2, 2, 1)]:
        loss, _, _ = ctc.ctc_loss(probs, target)
        expected = sums.get(target, 0.0)
        assert math.exp(-loss) == pytest.approx(expected, abs=1e-12)


def test_long_sequence_stays_finite():
    rng = np.random.default_rng(1)
    probs = random_frame_probs(rng, 400, 5)
    loss, _, _ = ctc.ctc_loss(probs, [1, 2, 3, 4] * 20)
    assert np.isfinite(loss) and loss > 0


def test_gradient_single_frame_closed_form():
    probs = np.array([[0.3, 0.5, 0.2]])
    g = ctc.ctc_gradient(probs, [1])
    np.testing.assert_allclose(g, [[0.0, -1 / 0.5, 0.0]], rtol=0, atol=1e-14)


def _fd_grad(probs, target, eps=1e-6):
    """Central differences treating each entry as an independent variable."""
    num = np.zeros_like(probs)
    for idx in np.ndindex(probs.shape):
        hi, lo = probs.copy(), probs.copy()
        hi[idx] += eps
        lo[idx] -= eps
        num[idx] = (ctc.ctc_loss_log(np.log(hi), target) - ctc.ctc_loss_log(np.log(lo), target)) / (2 * eps)
    return num


def test_gradient_matches_finite_differences_50_instances():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        t_len = int(rng.integers(2, 7))
        k = int(rng.integers(2, 5))
        probs = random_frame_probs(rng, t_len, k)
        length = int(rng.integers(0, (t_len + 1) // 2 + 1))
        target = [int(v) for v in rng.integers(1, k, size=length)]
        if not ctc.is_feasible(target, t_len):
            target = target[:1]
        g = ctc.ctc_gradient(probs, target)
        num = _fd_grad(probs, target)
        rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-7)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-5


def test_gradient_zero_outside_target_classes():
    rng = np.random.default_rng(3)
    probs = random_frame_probs(rng, 5, 4)
    g = ctc.ctc_gradient(probs, [1, 2])
    assert not np.any(g[:, 3])
    num = _fd_grad(probs, [1, 2])
    np.testing.assert_array_equal(num[:, 3] == 0, g[:, 3] == 0)


def test_logit_gradient_finite_differences():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((6, 4))
    target = [1, 3, 3]
    loss, g = ctc.ctc_logit_loss_grad(z, target)
    eps = 1e-5
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        hi, lo = z.copy(), z.copy()
        hi[idx] += eps
        lo[idx] -= eps
        num[idx] = (ctc.ctc_logit_loss_grad(hi, target)[0] - ctc.ctc_logit_loss_grad(lo, target)[0]) / (2 * eps)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


def test_greedy_examples():
    def onehot(seq, k=3):
        p = np.full((len(seq), k), 0.1 / (k - 1))
        p[np.arange(len(seq)), seq] = 0.9
        return p

    assert ctc.greedy_decode(onehot([1, 1, 2])).labels == (1, 2)
    assert ctc.greedy_decode(onehot([0, 0, 0])).labels == ()
    r = ctc.greedy_decode(onehot([1, 0, 1]))
    assert r.labels == (1, 1)
    assert r.score == pytest.approx(3 * math.log(0.9), abs=1e-14)


def test_beam_merges_paths_greedy_misses():
    probs = np.array([[0.6, 0.4], [0.6, 0.4]])
    assert ctc.greedy_decode(probs).labels == ()
    top = ctc.beam_decode(probs, beam_width=2)[0]
    assert top.labels == (1,)
    assert math.exp(top.score) == pytest.approx(0.64, abs=1e-12)


def test_beam_width_one_on_peaked_frames_is_greedy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = np.full((6, 4), 0.02)
        p[np.arange(6), rng.integers(0, 4, size=6)] = 0.94
        assert ctc.beam_decode(p, 1)[0].labels == ctc.greedy_decode(p).labels


@pytest.mark.parametrize("seed", range(10))
def test_beam_scores_are_exact_sequence_probs(seed):
    rng = np.random.default_rng(seed)
    probs = random_frame_probs(rng, 4, 3)
    sums = path_sums(probs)
    results = ctc.beam_decode(probs, beam_width=3 ** 4)
    assert len(results) == len(sums)
    for r in results:
        assert math.exp(r.score) == pytest.approx(sums[r.labels], abs=1e-12)
    scores = [r.score for r in results]
    assert scores == sorted(scores, reverse=True)


def test_beam_rejects_zero_width():
    with pytest.raises(RejectedInput):
        ctc.beam_decode(np.full((1, 2), 0.5), 0)


def test_lexicon_decode_examples():
    alpha = ctc.Alphabet("ab")
    p = np.array([[0.1, 0.8, 0.1], [0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    greedy = alpha.decode(ctc.greedy_decode(p).labels)
    assert ctc.lexicon_decode(p, [greedy], alpha).text == greedy
    strong_a = np.array([[0.1, 0.85, 0.05]] * 3)
    assert ctc.lexicon_decode(strong_a, ["a", "b"], alpha).text == "a"
    # "aaa" needs five frames and is dropped
    assert ctc.lexicon_decode(strong_a, ["aaa", "b"], alpha).text == "b"
    with pytest.raises(NoMatch):
        ctc.lexicon_decode(strong_a, ["aaa"], alpha)


def test_lexicon_decode_is_exact_argmax_and_breaks_ties_by_order():
    alpha = ctc.Alphabet("ab")
    rng = np.random.default_rng(5)
    for _ in range(10):
        p = random_frame_probs(rng, 4, 3)
        sums = path_sums(p)
        words = ["a", "b", "ab", "ba", "aa", "bb"]
        best = max(words, key=lambda w: sums.get(tuple(alpha.encode(w)), 0.0))
        assert ctc.lexicon_decode(p, words, alpha).text == best
    uniform = np.full((2, 3), 1 / 3)
    assert ctc.lexicon_decode(uniform, ["b", "a"], alpha).text == "b"


def test_lexicon_decode_folds_case():
    alpha = ctc.Alphabet("ab")
    p = np.array([[0.05, 0.9, 0.05]])
    assert ctc.lexicon_decode(p, ["B", "A"], alpha).text == "A"


def test_alphabet_round_trip_and_errors():
    alpha = ctc.Alphabet()
    assert alpha.size == 37
    assert alpha.decode(alpha.encode("abc09")) == "abc09"
    with pytest.raises(RejectedInput):
        alpha.encode("A")
    with pytest.raises(RejectedInput):
        ctc.Alphabet("aa")


def test_frame_probs_text_round_trip():
    rng = np.random.default_rng(2)
    p = random_frame_probs(rng, 3, 4)
    back = ctc.load_frame_probs(ctc.dump_frame_probs(p))
    assert np.array_equal(back, p)
    with pytest.raises(ParseError):
        ctc.load_frame_probs("2 2\n0.5 0.5\n")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 3), st.integers(0, 2**32 - 1))
def test_completeness_property(t_len, k, seed):
    probs = random_frame_probs(np.random.default_rng(seed), t_len, k)
    total = 0.0
    for length in range(t_len + 1):
        for target in itertools.product(range(1, k), repeat=length):
            loss, _, _ = ctc.ctc_loss(probs, target)
            total += math.exp(-loss)
    assert total == pytest.approx(1.0, abs=1e-9)
