import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from speclab.engine import DecodeSettings, DraftStrategy, SpecRoundResult, build_mask
from speclab.metrics import (
    all_token_alpha,
    bootstrap_ci,
    divergence_stats,
    match_rate,
    perplexity,
    tv_distance_topk,
    top1_agreement,
)
from speclab.model import ComponentMask, HybridModel, ModelConfig
from speclab.numerics import RngState


def synthetic_round(flags: list[bool]) -> SpecRoundResult:
    """Round with given greedy match flags under temperature-0 semantics."""
    accepted = 0
    while accepted < len(flags) and flags[accepted]:
        accepted += 1
    emitted = list(range(accepted + 1))
    return SpecRoundResult(accepted, accepted == len(flags), emitted, flags)


class TestBootstrapCI:
    def test_degenerate_data_has_zero_width(self):
        lo, hi = bootstrap_ci([0.7] * 50)
        assert lo == hi == 0.7

    def test_same_seed_same_interval(self):
        data = np.random.default_rng(0).normal(0, 1, 200)
        assert bootstrap_ci(data, seed=5) == bootstrap_ci(data, seed=5)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            bootstrap_ci([])

    @given(st.lists(st.floats(min_value=-100, max_value=100), min_size=1,
                    max_size=60), st.integers(0, 10))
    @settings(max_examples=30, deadline=None)
    def test_interval_contains_sample_mean(self, data, seed):
        lo, hi = bootstrap_ci(data, resamples=500, seed=seed)
        m = float(np.mean(data))
        assert lo - 1e-9 <= m <= hi + 1e-9

    def test_coverage_on_bernoulli_half(self):
        # ~95% of intervals over Bernoulli(0.5) samples should contain 0.5
        meta = RngState(99)
        hits = 0
        reps = 400
        for i, child in enumerate(meta.spawn(reps)):
            data = (child.uniforms(200) < 0.5).astype(float)
            lo, hi = bootstrap_ci(data, resamples=1000, seed=i)
            hits += lo <= 0.5 <= hi
        assert abs(hits / reps - 0.95) < 0.03


class TestAllTokenAlpha:
    def test_everything_accepted_is_alpha_one(self):
        rounds = [synthetic_round([True, True]) for _ in range(20)]
        stats = all_token_alpha(rounds, 2, resamples=200)
        assert stats.all_token_alpha == 1.0
        assert stats.per_token_alpha == 1.0
        assert stats.mean_accepted_per_round == 3.0

    def test_bernoulli_flags_follow_product_form(self):
        # i.i.d. per-position matches at rate p give alpha(k) -> p^k
        p, k, n = 0.8, 3, 20000
        rng = RngState(3)
        rounds = [synthetic_round([rng.uniform() < p for _ in range(k)])
                  for _ in range(n)]
        stats = all_token_alpha(rounds, k, resamples=500)
        assert abs(stats.all_token_alpha - p ** k) < 0.012
        assert abs(stats.per_token_alpha - p) < 0.01

    def test_per_token_at_least_all_token(self):
        rng = RngState(1)
        rounds = [synthetic_round([rng.uniform() < 0.6 for _ in range(4)])
                  for _ in range(300)]
        stats = all_token_alpha(rounds, 4, resamples=300)
        assert stats.per_token_alpha >= stats.all_token_alpha
        assert 1.0 <= stats.mean_accepted_per_round <= 5.0
        assert stats.ci_low <= stats.all_token_alpha <= stats.ci_high

    def test_empty_and_inconsistent_rounds_rejected(self):
        with pytest.raises(ValueError):
            all_token_alpha([], 2)
        rounds = [synthetic_round([True, True]), synthetic_round([True])]
        with pytest.raises(ValueError):
            all_token_alpha(rounds, 2)


class TestTvDistance:
    def test_identical_distributions(self):
        p = np.array([0.25, 0.75])
        assert tv_distance_topk(p, p) == 0.0

    def test_disjoint_supports(self):
        p = np.array([1.0, 0.0, 0.0, 0.0])
        q = np.array([0.0, 0.0, 0.5, 0.5])
        assert tv_distance_topk(p, q, 2) == 1.0

    def test_hand_case(self):
        p = np.array([0.6, 0.4])
        q = np.array([0.4, 0.6])
        assert abs(tv_distance_topk(p, q, 100) - 0.2) < 1e-12

    def test_k_top_larger_than_vocab_is_clamped(self):
        p = np.array([0.6, 0.4])
        q = np.array([0.4, 0.6])
        assert tv_distance_topk(p, q, 10**6) == tv_distance_topk(p, q, 2)

    @given(st.integers(0, 1000), st.integers(1, 40))
    @settings(max_examples=40)
    def test_symmetric_and_bounded(self, seed, k_top):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(16))
        q = rng.dirichlet(np.ones(16))
        d = tv_distance_topk(p, q, k_top)
        assert 0.0 <= d <= 1.0
        assert abs(d - tv_distance_topk(q, p, k_top)) < 1e-12

    def test_restriction_renormalizes(self):
        # mass outside the union support is discarded before comparing
        p = np.array([0.30, 0.30, 0.2, 0.2])
        q = np.array([0.30, 0.30, 0.2, 0.2])
        assert tv_distance_topk(p, q, 2) == 0.0


class TestTop1Agreement:
    def test_identical_streams(self):
        p = np.array([0.2, 0.8])
        assert top1_agreement([(p, p)] * 5) == 1.0

    def test_opposite_one_hots(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        assert top1_agreement([(a, b), (b, a)]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            top1_agreement([])


TINY = ModelConfig("parallel_hybrid", n_layers=4, d_model=16, n_heads=2,
                   d_state=4, vocab_size=16, context_limit=96)


class TestMatchRate:
    def test_any_strategy_is_lossless_in_wide_precision(self):
        m = HybridModel.from_seed(TINY, 0)
        prompts = [[1, 2, 3], [4, 5], [6, 7, 8, 9]]
        settings = DecodeSettings(k=3, temperature=0.0, max_new_tokens=16, seed=0)
        for kind in ("component_only", "layer_skip", "identity"):
            assert match_rate(m, DraftStrategy(kind), prompts, settings) == 1.0

    def test_requires_greedy(self):
        m = HybridModel.from_seed(TINY, 0)
        with pytest.raises(ValueError):
            match_rate(m, DraftStrategy("identity"), [[1]],
                       DecodeSettings(k=2, temperature=0.5, max_new_tokens=4))

    def test_no_prompts_rejected(self):
        m = HybridModel.from_seed(TINY, 0)
        with pytest.raises(ValueError):
            match_rate(m, DraftStrategy("identity"), [],
                       DecodeSettings(k=2, temperature=0.0, max_new_tokens=4))


class TestPerplexity:
    def uniform_model(self, vocab=16):
        cfg = ModelConfig("parallel_hybrid", n_layers=2, d_model=16, n_heads=2,
                          d_state=4, vocab_size=vocab, context_limit=32)
        m = HybridModel.from_seed(cfg, 0)
        m.weights["head_w"][:] = 0.0
        return m

    def test_uniform_model_scores_vocab_size(self):
        m = self.uniform_model()
        corpus = np.arange(100) % 16
        assert abs(perplexity(m, None, corpus) - 16.0) < 1e-9

    def test_two_token_corpus_with_half_probability(self):
        m = self.uniform_model(vocab=2)
        assert abs(perplexity(m, None, [0, 1]) - 2.0) < 1e-12

    def test_identity_mask_equals_absent_mask(self):
        cfg = TINY
        m = HybridModel.from_seed(cfg, 3)
        corpus = np.random.default_rng(0).integers(0, 16, 250)
        a = perplexity(m, None, corpus)
        b = perplexity(m, ComponentMask.full(cfg.n_layers), corpus)
        assert a == b

    def test_short_corpus_rejected(self):
        with pytest.raises(ValueError):
            perplexity(self.uniform_model(), None, [1])

    def test_stride_variants_agree_with_whole_sequence_scoring(self):
        cfg = TINY
        m = HybridModel.from_seed(cfg, 5)
        corpus = np.random.default_rng(1).integers(0, 16, cfg.context_limit)
        logits, _ = m.forward_prefix(corpus)
        from speclab.numerics import log_softmax
        logp = log_softmax(logits[:-1])
        nll = -logp[np.arange(corpus.size - 1), corpus[1:]]
        expect = float(np.exp(nll.mean()))
        assert abs(perplexity(m, None, corpus) - expect) < 1e-9

    def test_windows_cover_every_token_once(self):
        cfg = TINY
        m = HybridModel.from_seed(cfg, 5)
        corpus = np.random.default_rng(2).integers(0, 16, 3 * cfg.context_limit + 7)
        full = perplexity(m, None, corpus)
        halved = perplexity(m, None, corpus, stride=cfg.context_limit // 2)
        assert 0 < full < 20
        # overlapping windows give each token more context, not more weight
        assert 0 < halved < 20


class TestDivergenceStats:
    def test_identity_mask_has_zero_divergence(self):
        m = HybridModel.from_seed(TINY, 1)
        stats = divergence_stats(m, ComponentMask.full(TINY.n_layers),
                                 [[1, 2, 3, 4], [5, 6]])
        assert stats.tv_mean == 0.0
        assert stats.top1_agreement == 1.0
        assert stats.n_positions == 6

    def test_component_mask_diverges_on_random_weights(self):
        m = HybridModel.from_seed(TINY, 1)
        mask = build_mask(TINY, DraftStrategy("component_only"))
        stats = divergence_stats(m, mask, [[1, 2, 3, 4, 5, 6, 7]])
        assert stats.tv_mean > 0.0
        assert stats.n_positions == 7
