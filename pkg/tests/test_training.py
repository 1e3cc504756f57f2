from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qintent.autograd import Tensor
from qintent.models import DatasetArrays, ModelConfig, init_params, param_shapes
from qintent.synth import mlm_corpus
from qintent.text import CLS, MASK, PAD, IntentLabelSet, LabeledExample, build_vocab, reencode
from qintent.training import (
    OptimizerState,
    TrainHyper,
    compute_grads,
    encoder_names,
    mask_tokens,
    optimizer_step,
    predict_arrays,
    pretrain_mlm,
    train_classifier,
)

TOY_LABELS = IntentLabelSet(("A", "B", "C", "D"))


class TestHyper:
    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(batch_size=0), dict(optimizer="rmsprop"), dict(epochs=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainHyper(**kw)


class TestOptimizer:
    def test_sgd_scalar(self):
        p = {"w": np.array([1.0])}
        optimizer_step(p, {"w": np.array([2.0])}, OptimizerState(), TrainHyper(optimizer="sgd", lr=0.1, clip_norm=None))
        assert p["w"][0] == pytest.approx(0.8)

    def test_adam_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        state = OptimizerState()
        hp = TrainHyper(lr=0.1)
        optimizer_step(p, {"w": np.array([0.5, 0.5])}, state, hp)
        before, m_before = p["w"].copy(), state.m["w"].copy()
        # zero gradient: moments decay, parameters still move by the decayed momentum only
        optimizer_step(p, {"w": np.zeros(2)}, state, hp)
        np.testing.assert_allclose(state.m["w"], 0.9 * m_before)
        fresh = {"w": np.array([3.0])}
        optimizer_step(fresh, {"w": np.zeros(1)}, OptimizerState(), hp)
        assert fresh["w"][0] == 3.0
        assert not np.array_equal(before, p["w"])

    @given(st.floats(1e-3, 1e3), st.floats(1e-4, 1e-1))
    def test_adam_first_step_is_sign_step(self, g, lr):
        p = {"w": np.array([0.0])}
        optimizer_step(p, {"w": np.array([g])}, OptimizerState(), TrainHyper(lr=lr, clip_norm=None))
        assert p["w"][0] == pytest.approx(-lr * g / (g + 1e-8), rel=1e-9)

    def test_clipping_uses_global_norm(self):
        p = {"a": np.zeros(1), "b": np.zeros(1)}
        optimizer_step(p, {"a": np.array([3.0]), "b": np.array([4.0])}, OptimizerState(),
                       TrainHyper(optimizer="sgd", lr=1.0, clip_norm=1.0))
        np.testing.assert_allclose([p["a"][0], p["b"][0]], [-0.6, -0.8])

    def test_nan_gradient_names_tensor(self):
        with pytest.raises(FloatingPointError, match="cnn.bias"):
            optimizer_step({"cnn.bias": np.zeros(2)}, {"cnn.bias": np.array([np.nan, 0.0])}, OptimizerState(), TrainHyper())


def _toy_set(n=100, seed=0, vocab_size=12, L=6):
    """Separable: the label is fixed by the first token."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 4
        ids = [4 + label] + list(rng.integers(8, vocab_size, size=rng.integers(0, L)))
        ids = ids + [PAD] * (L - len(ids))
        out.append(LabeledExample("", tuple(ids), 0, tuple(np.eye(4)[rng.integers(4)]), label))
    return out


def _toy_cfg(arch, **kw):
    base = dict(vocab_size=12, emb_dim=8, filters=8, hidden=6, fusion_width=8, max_len=6, n_labels=4, feature_width=4)
    if arch == "TRANSFORMER":
        base = dict(vocab_size=12, hidden=8, layers=1, heads=2, max_positions=8, max_len=6, n_labels=4,
                    feature_width=4, fusion_width=8)
        base.update(kw)
        return ModelConfig.transformer(**base)
    base.update(kw)
    return ModelConfig.char(arch, **base)


VOCAB = build_vocab(["abcdefgh"], "char", 12)


class TestTrainClassifier:
    @pytest.mark.parametrize("arch", ["CNN", "BILSTM", "TRANSFORMER"])
    def test_overfits_separable_set(self, arch):
        ds = _toy_set()
        cfg = _toy_cfg(arch)
        bundle, hist = train_classifier(cfg, ds, None, TrainHyper(lr=1e-2, batch_size=20, epochs=200, patience=None),
                                        VOCAB, TOY_LABELS)
        data = DatasetArrays.build(cfg, ds)
        assert (predict_arrays(cfg, bundle.tensors(), data) == data.labels).all()

    @pytest.mark.parametrize("arch", ["TRILETTER_LR", "CNN", "BILSTM", "TRANSFORMER"])
    def test_initial_loss_near_log_c(self, arch):
        ds = _toy_set(200, seed=1)
        ds = [LabeledExample("abc"[: 1 + i % 3], e.token_ids, 0, e.features, e.label) for i, e in enumerate(ds)]
        cfg = _toy_cfg(arch)
        _, hist = train_classifier(cfg, ds, None, TrainHyper(epochs=1, batch_size=200), VOCAB, TOY_LABELS)
        assert abs(hist.initial_loss - math.log(4)) <= 0.1 * math.log(4)

    def test_deterministic(self, tmp_path):
        ds, dev = _toy_set(80, seed=2), _toy_set(20, seed=3)
        cfg = _toy_cfg("BILSTM")
        hp = TrainHyper(epochs=3, batch_size=16, seed=4)
        b1, h1 = train_classifier(cfg, ds, dev, hp, VOCAB, TOY_LABELS, metrics_path=tmp_path / "m.jsonl")
        b2, h2 = train_classifier(cfg, ds, dev, hp, VOCAB, TOY_LABELS)
        assert b1.checksum() == b2.checksum()
        assert h1 == h2
        lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [x["epoch"] for x in lines] == [0, 1, 2]

    def test_seed_changes_result(self):
        ds = _toy_set(40)
        cfg = _toy_cfg("CNN")
        a, _ = train_classifier(cfg, ds, None, TrainHyper(epochs=1, seed=0), VOCAB, TOY_LABELS)
        b, _ = train_classifier(cfg, ds, None, TrainHyper(epochs=1, seed=1), VOCAB, TOY_LABELS)
        assert a.checksum() != b.checksum()

    def test_history_shape_and_early_stop(self):
        ds = _toy_set(60)
        _, hist = train_classifier(_toy_cfg("CNN"), ds, ds, TrainHyper(lr=1e-2, epochs=40, patience=2, batch_size=20),
                                   VOCAB, TOY_LABELS)
        assert [e.epoch for e in hist.epochs] == list(range(len(hist.epochs)))
        assert hist.final_epoch == len(hist.epochs) - 1
        assert hist.stop_reason in ("early_stop", "max_epochs")
        assert hist.epochs[hist.best_epoch].dev_accuracy == max(e.dev_accuracy for e in hist.epochs)

    def test_empty_train(self):
        with pytest.raises(ValueError):
            train_classifier(_toy_cfg("CNN"), [], None, TrainHyper(), VOCAB, TOY_LABELS)

    def test_label_out_of_range(self):
        ds = _toy_set(8)
        ds[0] = LabeledExample("", ds[0].token_ids, 0, ds[0].features, 9)
        with pytest.raises(ValueError):
            train_classifier(_toy_cfg("CNN"), ds, None, TrainHyper(), VOCAB, TOY_LABELS)

    @pytest.mark.parametrize("arch", ["TRILETTER_LR", "CNN", "BILSTM", "TRANSFORMER"])
    def test_gradient_reaches_every_tensor(self, arch):
        cfg = _toy_cfg(arch)
        ds = [LabeledExample("abcd"[: 1 + i % 4], e.token_ids, 0, e.features, e.label) for i, e in enumerate(_toy_set(32))]
        tensors = {k: Tensor(v, requires_grad=True) for k, v in init_params(cfg, 0).items()}
        # 30 of 32 rows so the labels are unbalanced; a balanced batch zeroes the LR bias gradient exactly
        _, grads = compute_grads(cfg, tensors, DatasetArrays.build(cfg, ds).take(np.arange(30)))
        dead = [k for k, g in grads.items() if g is None or not np.any(g)]
        assert dead == []


class TestMasking:
    def test_rate_zero(self):
        ids = np.array([[CLS, 5, 6, PAD]])
        cor, sel, tgt = mask_tokens(ids, 0.0, seed=1)
        np.testing.assert_array_equal(cor, ids)
        assert not sel.any() and tgt.size == 0

    def test_rate_one_forced_mask(self):
        ids = np.array([[CLS, 5, 6, PAD], [7, 8, PAD, PAD]])
        cor, sel, tgt = mask_tokens(ids, 1.0, seed=1, split=(1.0, 0.0, 0.0))
        np.testing.assert_array_equal(cor, [[CLS, MASK, MASK, PAD], [MASK, MASK, PAD, PAD]])
        np.testing.assert_array_equal(tgt, [5, 6, 7, 8])

    def test_selected_fraction_binomial(self):
        ids = np.full((1000, 1000), 9)
        _, sel, _ = mask_tokens(ids, 0.15, seed=0)
        assert 0.147 <= sel.mean() <= 0.153

    def test_split_proportions(self):
        ids = np.full((400, 500), 9)
        cor, sel, _ = mask_tokens(ids, 0.5, seed=2, vocab_size=1000)
        picked = cor[sel]
        assert abs((picked == MASK).mean() - 0.8) < 0.01
        assert abs((picked == 9).mean() - 0.1) < 0.01 + 1e-3

    def test_deterministic(self):
        ids = np.random.default_rng(0).integers(4, 50, size=(20, 10))
        a = mask_tokens(ids, 0.3, seed=5, vocab_size=50)
        b = mask_tokens(ids, 0.3, seed=5, vocab_size=50)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            mask_tokens(np.ones((1, 2), int), 1.5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_never_touches_special_positions(self, seed, rate):
        ids = np.random.default_rng(seed).integers(0, 30, size=(5, 8))
        ids[:, 0] = CLS
        cor, sel, tgt = mask_tokens(ids, rate, seed=seed, vocab_size=30)
        assert not sel[(ids == PAD) | (ids == CLS)].any()
        np.testing.assert_array_equal(cor[~sel], ids[~sel])
        np.testing.assert_array_equal(tgt, ids[sel])


def _mlm_setup(n):
    corpus = mlm_corpus(n, seed=3)
    vocab = build_vocab(corpus, "word", 400)
    cfg = ModelConfig.transformer(vocab_size=len(vocab), hidden=32, layers=1, heads=4, max_positions=16, max_len=12,
                                  feature_width=0, fusion_width=16)
    return corpus, vocab, cfg


class TestPretrain:
    def test_initial_loss_near_log_v(self):
        corpus, vocab, cfg = _mlm_setup(400)
        _, hist = pretrain_mlm(cfg, corpus, vocab, TrainHyper(lr=5e-4, epochs=1, batch_size=400))
        assert abs(hist.initial_loss - math.log(len(vocab))) <= 0.1 * math.log(len(vocab))

    @pytest.mark.slow
    def test_loss_drops_after_five_epochs(self):
        corpus, vocab, cfg = _mlm_setup(45_000)
        assert sum(len(s.split()) for s in corpus) >= 100_000
        _, hist = pretrain_mlm(cfg, corpus, vocab, TrainHyper(lr=5e-4, epochs=5, batch_size=128))
        assert hist.epochs[-1].train_loss < 0.7 * hist.initial_loss

    def test_finetune_init_keeps_encoder_manifest(self):
        corpus, vocab, cfg = _mlm_setup(200)
        pre, _ = pretrain_mlm(cfg, corpus, vocab, TrainHyper(lr=5e-4, epochs=1, batch_size=64))
        ds = [LabeledExample(s, (), 0, (), i % 5) for i, s in enumerate(corpus[:50])]
        ds = reencode(ds, vocab, cfg.max_len)
        tuned, _ = train_classifier(cfg, ds, None, TrainHyper(epochs=1, lr=1e-9), vocab, IntentLabelSet(), init=pre)
        shapes = param_shapes(cfg)
        for name in encoder_names(cfg):
            assert tuned.params[name].shape == pre.params[name].shape == shapes[name]
            np.testing.assert_allclose(tuned.params[name], pre.params[name], atol=1e-6)

    def test_empty_corpus(self):
        _, vocab, cfg = _mlm_setup(10)
        with pytest.raises(ValueError):
            pretrain_mlm(cfg, [], vocab, TrainHyper())

    def test_requires_transformer(self):
        with pytest.raises(ValueError):
            pretrain_mlm(ModelConfig.char("CNN"), ["a"], VOCAB, TrainHyper())
