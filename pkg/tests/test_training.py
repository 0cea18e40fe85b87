import math

import numpy as np
import pytest

import speclab.training as training
from speclab.corpus import make_corpus
from speclab.engine import DraftStrategy, build_mask
from speclab.model import ComponentMask, HybridModel, ModelConfig, init_weights
from speclab.training import (
    TrainConfig,
    TrainingDiverged,
    cross_entropy,
    evaluate_loss,
    forward_train,
    backward_train,
    grad_check,
    load_corpus,
    sample_batch,
    train,
)

TINY_PAR = ModelConfig("parallel_hybrid", n_layers=2, d_model=16, n_heads=2,
                       d_state=4, vocab_size=24, context_limit=48)
TINY_SEQ = ModelConfig("sequential_hybrid", n_layers=2, d_model=16, n_heads=2,
                       d_state=4, vocab_size=24, context_limit=48,
                       layer_pattern=("linear", "attention"))
TINY_TRA = ModelConfig("transformer", n_layers=2, d_model=16, n_heads=2,
                       d_state=4, vocab_size=24, context_limit=48)
# byte-vocab variants for tests that consume real corpus bytes
BYTE_PAR = ModelConfig("parallel_hybrid", n_layers=2, d_model=16, n_heads=2,
                       d_state=4, vocab_size=256, context_limit=48)
BYTE_SEQ = ModelConfig("sequential_hybrid", n_layers=2, d_model=16, n_heads=2,
                       d_state=4, vocab_size=256, context_limit=48,
                       layer_pattern=("linear", "attention"))


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "train.bin"
    path.write_bytes(make_corpus(30_000, seed=11))
    return str(path)


def small_batch(cfg, seed=0, b=2, t=12):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, cfg.vocab_size, (b, t)),
            rng.integers(0, cfg.vocab_size, (b, t)))


class TestGradCheck:
    @pytest.mark.parametrize("cfg", [TINY_PAR, TINY_SEQ, TINY_TRA],
                             ids=lambda c: c.arch)
    def test_full_models_match_finite_differences(self, cfg):
        w = init_weights(cfg, 1)
        x, y = small_batch(cfg)
        assert grad_check(cfg, w, x, y, n_samples=120) < 1e-4

    def test_head_only_degenerate_model_is_near_exact(self):
        cfg = TINY_PAR
        w = init_weights(cfg, 1)
        mask = ComponentMask((False,) * 2, (False,) * 2, (True,) * 2)
        x, y = small_batch(cfg)
        # step chosen at the truncation/rounding crossover of the nearly
        # linear head-only loss
        assert grad_check(cfg, w, x, y, mask=mask, n_samples=60,
                          step=3e-6) < 1e-7

    @pytest.mark.parametrize("cfg", [TINY_PAR, TINY_SEQ],
                             ids=lambda c: c.arch)
    def test_masked_forward_gradients(self, cfg):
        w = init_weights(cfg, 2)
        mask = build_mask(cfg, DraftStrategy("component_only"))
        x, y = small_batch(cfg, seed=3)
        assert grad_check(cfg, w, x, y, mask=mask, n_samples=80) < 1e-4

    def test_disabled_components_get_zero_gradient(self):
        cfg = TINY_PAR
        w = init_weights(cfg, 1)
        mask = build_mask(cfg, DraftStrategy("component_only"))
        x, y = small_batch(cfg)
        logits, tape = forward_train(cfg, w, mask, x)
        _, dlogits = cross_entropy(logits, y)
        grads = backward_train(cfg, w, tape, dlogits)
        for i in range(cfg.n_layers):
            for p in ("wq", "wk", "wv", "wo", "norm_g"):
                assert not grads[f"layers.{i}.attn.{p}"].any()
            assert grads[f"layers.{i}.ssm.w_in"].any()


class TestForwardEquivalence:
    @pytest.mark.parametrize("cfg", [TINY_PAR, TINY_SEQ, TINY_TRA],
                             ids=lambda c: c.arch)
    def test_batched_forward_matches_decode_path(self, cfg):
        m = HybridModel.from_seed(cfg, 4)
        toks = np.random.default_rng(0).integers(0, cfg.vocab_size, 31)
        batched, _ = forward_train(cfg, m.weights, None, toks[None])
        prefix, _ = m.forward_prefix(toks)
        np.testing.assert_allclose(batched[0], prefix, atol=1e-12, rtol=0)

    def test_masked_equivalence(self):
        cfg = TINY_SEQ
        m = HybridModel.from_seed(cfg, 4)
        mask = build_mask(cfg, DraftStrategy("component_only"))
        toks = np.random.default_rng(1).integers(0, cfg.vocab_size, 20)
        batched, _ = forward_train(cfg, m.weights, mask, toks[None])
        prefix, _ = m.forward_prefix(toks, mask)
        np.testing.assert_allclose(batched[0], prefix, atol=1e-12, rtol=0)

    @pytest.mark.skipif(not training._HAVE_NUMBA, reason="numba not installed")
    def test_compiled_scan_matches_numpy_fallback(self, monkeypatch):
        cfg = TINY_PAR
        w = init_weights(cfg, 5)
        x, y = small_batch(cfg, seed=7, b=3, t=21)
        logits_a, tape_a = forward_train(cfg, w, None, x)
        _, dl = cross_entropy(logits_a, y)
        grads_a = backward_train(cfg, w, tape_a, dl)
        monkeypatch.setattr(training, "_HAVE_NUMBA", False)
        logits_b, tape_b = forward_train(cfg, w, None, x)
        grads_b = backward_train(cfg, w, tape_b, dl)
        np.testing.assert_allclose(logits_a, logits_b, atol=1e-12, rtol=0)
        for name in grads_a:
            np.testing.assert_allclose(grads_a[name], grads_b[name],
                                       atol=1e-10, rtol=0, err_msg=name)


class TestTrainLoop:
    def test_zero_steps_returns_seeded_init(self, corpus_file):
        tcfg = TrainConfig(corpus_path=corpus_file, steps=0, seq_len=24, seed=9)
        w, history = train(BYTE_PAR, tcfg)
        ref = init_weights(BYTE_PAR, 9)
        assert history == []
        for name, arr in w.items():
            np.testing.assert_array_equal(arr, ref[name])

    def test_training_is_bitwise_reproducible(self, corpus_file):
        tcfg = TrainConfig(corpus_path=corpus_file, steps=8, batch_size=2,
                           seq_len=24, seed=13)
        w1, h1 = train(BYTE_PAR, tcfg)
        w2, h2 = train(BYTE_PAR, tcfg)
        assert h1 == h2
        for name, arr in w1.items():
            np.testing.assert_array_equal(arr, w2[name])

    def test_loss_beats_uniform_baseline(self, corpus_file):
        tcfg = TrainConfig(corpus_path=corpus_file, steps=150, batch_size=4,
                           seq_len=32, learning_rate=3e-3, seed=1)
        _, history = train(BYTE_PAR, tcfg)
        tail = [loss for _, loss in history[-15:]]
        assert np.mean(tail) < math.log(256)

    def test_final_losses_beat_initial_model_on_same_batches(self, corpus_file):
        tcfg = TrainConfig(corpus_path=corpus_file, steps=120, batch_size=4,
                           seq_len=32, seed=2)
        w, history = train(BYTE_SEQ, tcfg)
        corpus = load_corpus(corpus_file)
        init_w = init_weights(BYTE_SEQ, 2)
        rng = np.random.default_rng(0)
        init_losses, final_losses = [], []
        for _ in range(6):
            x = rng.integers(0, corpus.size - 33, 4)
            idx = x[:, None] + np.arange(33)[None]
            window = corpus[idx]
            init_losses.append(evaluate_loss(BYTE_SEQ, init_w, None,
                                             window[:, :-1], window[:, 1:]))
            final_losses.append(evaluate_loss(BYTE_SEQ, w, None,
                                              window[:, :-1], window[:, 1:]))
        tail = np.mean([l for _, l in history[-12:]])
        assert tail < np.mean(init_losses)
        assert np.mean(final_losses) < np.mean(init_losses)

    def test_masked_training_never_touches_disabled_blocks(self, corpus_file):
        mask = build_mask(BYTE_PAR, DraftStrategy("component_only"))
        tcfg = TrainConfig(corpus_path=corpus_file, steps=5, batch_size=2,
                           seq_len=16, seed=3)
        w, _ = train(BYTE_PAR, tcfg, mask=mask)
        ref = init_weights(BYTE_PAR, 3)
        for i in range(BYTE_PAR.n_layers):
            for p in ("wq", "wk", "wv", "wo"):
                np.testing.assert_array_equal(w[f"layers.{i}.attn.{p}"],
                                              ref[f"layers.{i}.attn.{p}"])
        assert not np.array_equal(w["layers.0.ssm.w_in"],
                                  ref["layers.0.ssm.w_in"])

    def test_missing_and_empty_corpus_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            train(BYTE_PAR, TrainConfig(corpus_path=str(tmp_path / "nope"),
                                        steps=1, seq_len=16))
        empty = tmp_path / "empty.bin"
        empty.write_bytes(b"")
        with pytest.raises(ValueError):
            train(BYTE_PAR, TrainConfig(corpus_path=str(empty), steps=1,
                                        seq_len=16))

    def test_divergence_reports_step_index(self, corpus_file, monkeypatch):
        def poisoned(cfg, seed):
            w = init_weights(cfg, seed)
            w["head_w"][0, 0] = np.nan
            return w
        monkeypatch.setattr(training, "init_weights", poisoned)
        with pytest.raises(TrainingDiverged) as exc:
            train(BYTE_PAR, TrainConfig(corpus_path=corpus_file, steps=3,
                                        seq_len=16))
        assert exc.value.step == 0

    def test_training_log_csv(self, corpus_file, tmp_path):
        log = tmp_path / "log.csv"
        tcfg = TrainConfig(corpus_path=corpus_file, steps=4, batch_size=2,
                           seq_len=16, seed=0, log_path=str(log))
        train(BYTE_PAR, tcfg)
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 5

    def test_seq_len_beyond_context_rejected(self, corpus_file):
        with pytest.raises(ValueError):
            train(BYTE_PAR, TrainConfig(corpus_path=corpus_file, steps=1,
                                        seq_len=BYTE_PAR.context_limit + 1))


class TestSampleBatch:
    def test_shapes_and_target_shift(self):
        corpus = np.arange(100) % 7
        from speclab.numerics import RngState
        x, y = sample_batch(corpus, 3, 10, RngState(0))
        assert x.shape == y.shape == (3, 10)
        np.testing.assert_array_equal(x[:, 1:], y[:, :-1])

    def test_corpus_too_short(self):
        from speclab.numerics import RngState
        with pytest.raises(ValueError):
            sample_batch(np.arange(5), 1, 10, RngState(0))
