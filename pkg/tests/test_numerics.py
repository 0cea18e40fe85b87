import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from scipy import stats

from speclab.numerics import (
    RngState,
    argmax_tiebreak,
    rms_norm,
    sample_categorical,
    softmax,
    validate_distribution,
)

finite_logits = st.lists(
    st.floats(min_value=-1e4, max_value=1e4, allow_nan=False), min_size=1,
    max_size=40,
).map(lambda xs: np.array(xs))


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_hand_evaluated_exp_normalize(self):
        # exp(ln 2) = 2, exp(0) = 1 -> (2/3, 1/3)
        p = softmax(np.array([math.log(2.0), 0.0]))
        np.testing.assert_allclose(p, [2 / 3, 1 / 3], atol=1e-15)

    def test_zero_temperature_is_greedy_one_hot(self):
        np.testing.assert_array_equal(softmax(np.array([1.0, 3.0]), 0.0), [0.0, 1.0])

    def test_zero_temperature_tie_breaks_low_index(self):
        np.testing.assert_array_equal(
            softmax(np.array([2.0, 2.0, 1.0]), 0.0), [1.0, 0.0, 0.0])

    def test_empty_logits_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([1.0, 2.0]), -0.5)

    def test_nonfinite_logits_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([1.0, np.inf]))

    @given(finite_logits, st.floats(min_value=1e-3, max_value=1e3))
    def test_output_is_valid_distribution(self, logits, temp):
        validate_distribution(softmax(logits, temp))

    @given(finite_logits,
           st.floats(min_value=-1e3, max_value=1e3, allow_nan=False))
    def test_shift_invariance(self, logits, c):
        np.testing.assert_allclose(
            softmax(logits + c), softmax(logits), atol=1e-12)

    @given(finite_logits, st.floats(min_value=1e-2, max_value=1e2))
    def test_argmax_invariant_to_temperature(self, logits, temp):
        assert argmax_tiebreak(softmax(logits, temp)) == \
            argmax_tiebreak(softmax(logits, 1.0))


class TestArgmaxTiebreak:
    def test_plain_maximum(self):
        assert argmax_tiebreak(np.array([0.2, 0.5, 0.3])) == 1

    def test_tie_resolves_to_lowest_index(self):
        assert argmax_tiebreak(np.array([0.5, 0.5])) == 0

    @pytest.mark.parametrize("i", [0, 3, 7])
    def test_one_hot_identity(self, i):
        p = np.zeros(8)
        p[i] = 1.0
        assert argmax_tiebreak(p) == i


class TestSampleCategorical:
    def test_one_hot_always_returns_its_index(self):
        p = np.zeros(8)
        p[3] = 1.0
        for seed in (0, 1, 99):
            assert sample_categorical(p, RngState(seed)) == 3

    def test_same_seed_same_draw(self):
        p = np.array([0.1, 0.2, 0.3, 0.4])
        a = [sample_categorical(p, RngState(7)) for _ in range(5)]
        b = [sample_categorical(p, RngState(7)) for _ in range(5)]
        assert a == b

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            sample_categorical(np.zeros(4), RngState(0))

    def test_frequencies_match_distribution(self):
        # chi-square on 100k draws from (0.25, 0.75)
        p = np.array([0.25, 0.75])
        rng = RngState(1234)
        draws = np.array([sample_categorical(p, rng) for _ in range(100_000)])
        counts = np.bincount(draws, minlength=2)
        _, pval = stats.chisquare(counts, p * 100_000)
        assert pval > 0.01

    @given(st.integers(min_value=0, max_value=2**63 - 1))
    @settings(max_examples=25)
    def test_reproducible_sequences_bitwise(self, seed):
        a = RngState(seed).uniforms(32)
        b = RngState(seed).uniforms(32)
        np.testing.assert_array_equal(a, b)

    def test_spawned_substreams_are_independent_and_stable(self):
        parent = RngState(5)
        kids_a = parent.spawn(3)
        kids_b = RngState(5).spawn(3)
        for ka, kb in zip(kids_a, kids_b):
            np.testing.assert_array_equal(ka.uniforms(8), kb.uniforms(8))
        assert not np.array_equal(kids_a[0].uniforms(8), kids_a[1].uniforms(8))


class TestRmsNorm:
    def test_zero_input_stays_zero(self):
        x = np.zeros(6)
        np.testing.assert_array_equal(rms_norm(x, np.ones(6)), x)

    def test_unit_mean_square_is_identity(self):
        x = np.ones(4)
        np.testing.assert_allclose(rms_norm(x, np.ones(4), eps=0.0), x)

    def test_rescales_by_root_mean_square(self):
        # mean square of (2, 2) is 4 -> divide by 2
        np.testing.assert_allclose(
            rms_norm(np.array([2.0, 2.0]), np.ones(2), eps=0.0), [1.0, 1.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            rms_norm(np.ones(4), np.ones(3))

    def test_broadcasts_over_leading_axes(self):
        x = np.arange(24, dtype=float).reshape(2, 3, 4)
        out = rms_norm(x, np.ones(4))
        np.testing.assert_allclose(out[1, 2], rms_norm(x[1, 2], np.ones(4)))


class TestValidateDistribution:
    def test_accepts_valid(self):
        validate_distribution(np.array([0.25, 0.75]))

    @pytest.mark.parametrize("bad", [
        np.array([0.5, 0.6]),            # sum != 1
        np.array([-0.1, 1.1]),           # negative entry
        np.array([np.nan, 1.0]),         # non-finite
        np.array([]),                    # empty
    ])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            validate_distribution(bad)

    def test_vocab_size_checked(self):
        with pytest.raises(ValueError):
            validate_distribution(np.array([1.0]), vocab_size=2)
