"""Model assembly, training mechanics, optimizer, checkpoints, gradients."""
import numpy as np
import pytest

from lexfuse import autodiff as ad
from lexfuse.autodiff import Tensor
from lexfuse.classifier import focal_loss_from_logits
from lexfuse.data import SynthSpec, generate_synthetic, generate_synthetic_vectors
from lexfuse.embedding import batch_embed
from lexfuse.encoder import EncoderConfig, encoder_layer
from lexfuse.harness import evaluate
from lexfuse.lexicon import build_trie
from lexfuse.pipeline import (
    AdamState,
    CheckpointError,
    ModelParams,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    backward,
    batch_loss,
    collate,
    forward,
    forward_logits,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
    _gradcheck_fixture,
)

TINY = EncoderConfig(d_model=8, n_heads=2, n_layers=2, fusion_layer=1, dropout_rate=0.0)


def tiny_setup(loss_kind="focal", enable_synonyms=True, seed=0):
    cfg = TrainConfig(
        loss_kind=loss_kind, gamma=2.0, dropout_rate=0.0, h_max=2, max_len=6, seed=seed,
        enable_synonyms=enable_synonyms,
    )
    inputs, contexts = _gradcheck_fixture(seed=seed)
    params = ModelParams.initialize(
        TINY, vocab_size=8, max_len=6, d_w=6, n_syn=4, seed=seed, dtype=np.float64, init_std=0.3
    )
    return cfg, inputs, contexts, params


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(loss_kind="hinge")
        with pytest.raises(ValueError):
            TrainConfig(gamma=-0.1)


class TestForward:
    def test_eval_deterministic_bitwise(self):
        cfg, inputs, contexts, params = tiny_setup()
        a = forward(inputs, contexts, params, TINY, cfg, "eval")
        b = forward(inputs, contexts, params, TINY, cfg, "eval")
        assert np.array_equal(a, b)

    def test_probabilities_normalized(self):
        cfg, inputs, contexts, params = tiny_setup()
        probs = forward(inputs, contexts, params, TINY, cfg, "eval")
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_batch_equals_concatenated_singles(self):
        cfg, inputs, contexts, params = tiny_setup()
        batched = forward(inputs, contexts, params, TINY, cfg, "eval")
        singles = np.vstack(
            [forward([i], [c], params, TINY, cfg, "eval") for i, c in zip(inputs, contexts)]
        )
        np.testing.assert_allclose(batched, singles, atol=1e-12)

    def test_synonyms_disabled_equals_identity_hook_encoder(self):
        """With fusion off, the forward pass must be bitwise the plain
        encoder + head applied to the same batch."""
        cfg, inputs, contexts, params = tiny_setup(enable_synonyms=False)
        got = forward(inputs, contexts, params, TINY, cfg, "eval")

        batch = collate(inputs, contexts)
        with ad.no_grad():
            e = batch_embed(
                batch.token_ids, batch.segment_ids,
                params.tok_emb, params.seg_emb, params.pos_emb,
            )
            x = e
            for layer in params.layers:
                x = encoder_layer(x, batch.attention_mask, layer, TINY)
            cls = x.data[:, 0, :]
        logits = cls @ params.head.w_class.data.T + params.head.b_class.data
        z = logits - logits.max(axis=-1, keepdims=True)
        want = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        assert np.array_equal(got, want)

    def test_train_mode_requires_rng_when_dropout_on(self):
        cfg, inputs, contexts, params = tiny_setup()
        enc = EncoderConfig(d_model=8, n_heads=2, n_layers=2, fusion_layer=1, dropout_rate=0.5)
        with pytest.raises(ValueError):
            forward(inputs, contexts, params, enc, cfg, "train")

    def test_empty_batch_rejected(self):
        cfg, inputs, contexts, params = tiny_setup()
        with pytest.raises(ValueError):
            collate([], [])


class TestBackward:
    def test_disabled_fusion_has_exactly_zero_grads(self):
        cfg, inputs, contexts, params = tiny_setup(enable_synonyms=False)
        batch = collate(inputs, contexts)
        _, grads = backward(batch, params, TINY, cfg)
        assert np.array_equal(grads["fusion.w1"], np.zeros_like(grads["fusion.w1"]))
        assert np.array_equal(grads["fusion.w2"], np.zeros_like(grads["fusion.w2"]))
        assert np.array_equal(grads["syn_emb"], np.zeros_like(grads["syn_emb"]))
        # everything on the live path is nonzero
        assert np.abs(grads["tok_emb"]).sum() > 0
        assert np.abs(grads["head.w_class"]).sum() > 0

    def test_scalar_toy_model_matches_hand_derivative(self):
        """Single weight w, input x, label 1: logits (0, w*x) under focal
        loss.  Hand derivative of -(1-p)^g log p with p = sigmoid(w*x):
        dL/dw = [g (1-p)^(g-1) ln p - (1-p)^g / p] * x * p * (1-p)."""
        w = Tensor(np.array([[0.7]]), requires_grad=True)
        x, gamma = 1.3, 2.0

        # logits = (0, w*x) as a (1, 2) row
        logits = ad.scatter_add2(
            Tensor(np.zeros((1, 2))), np.array([0]), np.array([1]), (w * x).reshape(1)
        )
        loss = focal_loss_from_logits(logits, np.array([1]), gamma)
        loss.backward()

        p = 1.0 / (1.0 + np.exp(-0.7 * x))
        hand = (gamma * (1 - p) ** (gamma - 1) * np.log(p) - (1 - p) ** gamma / p) * x * p * (1 - p)
        np.testing.assert_allclose(w.grad[0, 0], hand, rtol=1e-10)

    def test_nan_parameter_detected(self):
        cfg, inputs, contexts, params = tiny_setup()
        params.tok_emb.data[0, 0] = np.nan
        batch = collate(inputs, contexts)
        with pytest.raises(TrainingDivergedError):
            backward(batch, params, TINY, cfg)


class TestAdam:
    def test_zero_grad_leaves_params(self):
        _, _, _, params = tiny_setup()
        before = {n: t.data.copy() for n, t in params.named_tensors()}
        grads = {n: np.zeros_like(t.data) for n, t in params.named_tensors()}
        adam_step(params, grads, AdamState.for_params(params), lr=1e-3)
        for n, t in params.named_tensors():
            assert np.array_equal(before[n], t.data)

    def test_first_step_magnitude(self):
        """With unit gradient, the bias-corrected first update has
        magnitude lr / (1 + eps)."""
        _, _, _, params = tiny_setup()
        before = params.tok_emb.data.copy()
        grads = {n: np.zeros_like(t.data) for n, t in params.named_tensors()}
        grads["tok_emb"] = np.ones_like(before)
        adam_step(params, grads, AdamState.for_params(params), lr=1e-3)
        update = before - params.tok_emb.data
        np.testing.assert_allclose(update, 1e-3 / (1 + 1e-8), rtol=1e-12)

    def test_two_steps_match_reference_trace(self):
        """Two updates agree with an independently coded Adam loop."""
        _, _, _, params = tiny_setup()
        rng = np.random.default_rng(0)
        g1 = {n: rng.normal(size=t.data.shape) for n, t in params.named_tensors()}
        g2 = {n: rng.normal(size=t.data.shape) for n, t in params.named_tensors()}
        theta0 = {n: t.data.copy() for n, t in params.named_tensors()}

        state = AdamState.for_params(params)
        adam_step(params, g1, state, lr=0.01)
        adam_step(params, g2, state, lr=0.01)

        b1, b2, eps = 0.9, 0.999, 1e-8
        for n, t in params.named_tensors():
            m = v = 0.0
            theta = theta0[n]
            for step, g in enumerate((g1[n], g2[n]), start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                mh = m / (1 - b1**step)
                vh = v / (1 - b2**step)
                theta = theta - 0.01 * mh / (np.sqrt(vh) + eps)
            np.testing.assert_allclose(t.data, theta, atol=1e-15)


class TestTrain:
    def datasets(self, seed=0):
        ds, lex = generate_synthetic(SynthSpec(n_pos=6, n_neg=12, seed=seed))
        table = generate_synthetic_vectors(lex, dim=6, seed=seed)
        return ds, build_trie(lex), table

    def enc(self):
        return EncoderConfig(d_model=16, n_heads=2, d_ff=32, n_layers=2, fusion_layer=1)

    def test_same_seed_identical_history(self, tmp_path):
        ds, trie, table = self.datasets()
        cfg = TrainConfig(epochs=2, batch_size=4, max_len=16, seed=7, h_max=2)
        h1 = train(cfg, self.enc(), ds, ds, trie=trie, table=table).history
        h2 = train(cfg, self.enc(), ds, ds, trie=trie, table=table).history
        assert h1 == h2
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_history(h1, p1)
        save_history(h2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seed_differs(self):
        ds, trie, table = self.datasets()
        cfg7 = TrainConfig(epochs=1, batch_size=4, max_len=16, seed=7)
        cfg8 = TrainConfig(epochs=1, batch_size=4, max_len=16, seed=8)
        h7 = train(cfg7, self.enc(), ds, ds, trie=trie, table=table).history
        h8 = train(cfg8, self.enc(), ds, ds, trie=trie, table=table).history
        assert h7 != h8

    def test_history_structure(self):
        ds, trie, table = self.datasets()
        cfg = TrainConfig(epochs=3, batch_size=4, max_len=16, seed=0)
        res = train(cfg, self.enc(), ds, ds, trie=trie, table=table)
        assert [h["epoch"] for h in res.history] == [1, 2, 3]
        for h in res.history:
            assert set(h) == {"epoch", "train_loss", "dev_precision", "dev_recall", "dev_f1"}

    def test_empty_train_set_rejected(self):
        from lexfuse.data import Dataset

        with pytest.raises(ValueError):
            train(TrainConfig(epochs=1), self.enc(), Dataset([]), None)

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_trained_model_predicts(self):
        ds, trie, table = self.datasets()
        cfg = TrainConfig(epochs=1, batch_size=4, max_len=16, seed=0)
        model = train(cfg, self.enc(), ds, None, trie=trie, table=table).model
        out = model.predict(ds.examples[0][0])
        assert out["label"] in (0, 1)
        np.testing.assert_allclose(sum(out["probabilities"]), 1.0, atol=1e-6)

    def test_keywords_disabled_uses_single_segment(self):
        ds, trie, table = self.datasets()
        cfg = TrainConfig(epochs=1, batch_size=4, max_len=16, seed=0, enable_keywords=False)
        model = train(cfg, self.enc(), ds, None, trie=trie, table=table).model
        inp, ctx, kws = model.prepare(ds.examples[0][0])
        assert inp.segment_ids.sum() == 0
        assert (inp.token_ids == 3).sum() == 1  # single [SEP]
        assert not ctx.entries


class TestGradientCheck:
    def test_passes_both_losses(self):
        for kind, gamma in (("focal", 2.0), ("cross_entropy", 0.0)):
            report = gradient_check(loss_kind=kind, gamma=gamma)
            assert report.passed, report.format()

    def test_fault_injection_flagged(self):
        report = gradient_check(inject_fault="fusion.w2")
        assert not report.passed
        assert report.failures == ["fusion.w2"]
        assert "FAIL" in report.format()

    def test_unknown_fault_tensor_rejected(self):
        with pytest.raises(ValueError):
            gradient_check(inject_fault="nonexistent")

    def test_requires_zero_dropout(self):
        enc = EncoderConfig(d_model=8, n_heads=2, n_layers=2, fusion_layer=1, dropout_rate=0.1)
        with pytest.raises(ValueError):
            gradient_check(enc_cfg=enc)


class TestCheckpoint:
    def trained(self, tmp_path, **cfg_kw):
        ds, lex = generate_synthetic(SynthSpec(n_pos=4, n_neg=8, seed=1))
        table = generate_synthetic_vectors(lex, dim=5, seed=1)
        trie = build_trie(lex)
        enc = EncoderConfig(d_model=8, n_heads=2, d_ff=16, n_layers=2, fusion_layer=1)
        cfg = TrainConfig(epochs=1, batch_size=4, max_len=12, seed=0, h_max=2, **cfg_kw)
        model = train(cfg, enc, ds, None, trie=trie, table=table).model
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        return model, path

    def test_roundtrip_bitwise(self, tmp_path):
        model, path = self.trained(tmp_path)
        loaded = load_checkpoint(path)
        for (n1, t1), (n2, t2) in zip(model.params.named_tensors(), loaded.params.named_tensors()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data), n1
        assert loaded.vocab.id_to_word == model.vocab.id_to_word
        assert loaded.keyword_syn_ids == model.keyword_syn_ids
        assert loaded.enc_cfg == model.enc_cfg
        assert loaded.train_cfg == model.train_cfg

    def test_roundtrip_predictions_identical(self, tmp_path):
        model, path = self.trained(tmp_path)
        loaded = load_checkpoint(path)
        text = "bamevi gave me awful lirido pains"
        assert model.predict(text) == loaded.predict(text)

    def test_truncated_file_detected(self, tmp_path):
        _, path = self.trained(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_detected(self, tmp_path):
        _, path = self.trained(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(b"NOTLEXFU" + blob[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_trailing_garbage_detected(self, tmp_path):
        _, path = self.trained(tmp_path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_architecture_mismatch_reports_both_values(self, tmp_path):
        _, path = self.trained(tmp_path)
        other = EncoderConfig(d_model=16, n_heads=2, d_ff=16, n_layers=2, fusion_layer=1)
        with pytest.raises(CheckpointError, match="d_model: checkpoint=8, expected=16"):
            load_checkpoint(path, expect_encoder=other)


class TestOverfit:
    def test_small_separable_set_reaches_f1_one(self):
        """A quick version of the separable overfit run (the desk-scale
        version lives in the acceptance suite)."""
        ds, lex = generate_synthetic(SynthSpec(n_pos=12, n_neg=12, keyword_signal=1.0, seed=5))
        trie = build_trie(lex)
        enc = EncoderConfig(d_model=32, n_heads=2, d_ff=64, n_layers=2, fusion_layer=1)
        cfg = TrainConfig(learning_rate=2e-3, epochs=30, batch_size=8, max_len=20, seed=0)
        res = train(cfg, enc, ds, ds, trie=trie)
        best = max(h["dev_f1"] for h in res.history)
        assert best == 1.0
