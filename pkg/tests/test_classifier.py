import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ultrasonic_backdoor.classifier import (
    NON_TRAINABLE,
    Architecture,
    ConvBlock,
    ModelConfig,
    TrainConfig,
    TrainedModel,
    _streams,
    dataset_loss,
    evaluate_accuracy,
    init_params,
    load_model,
    loss_and_grads,
    make_dropout_masks,
    predict,
    predict_classes,
    predict_proba,
    save_model,
    train,
)
from ultrasonic_backdoor.errors import CheckpointError, EvaluationError, ShapeError, TrainingDivergedError
from ultrasonic_backdoor.features import FeatureMatrix

SMALL = dict(n_classes=3, input_shape=(8, 10), conv_blocks=(ConvBlock(2, 3, 2), ConvBlock(3, 2, 1)),
             hidden_units=4, l2_lambda=0.1)


def finite_difference_check(cfg, rng, eps=1e-4, max_entries=None):
    """Worst relative error between analytic and central-difference gradients, per parameter."""
    params = init_params(cfg, rng, dtype=np.float64)
    n_frames, n_coeffs = cfg.input_shape
    params["input_mean"] = 0.1 * rng.standard_normal(n_coeffs)
    params["input_std"] = 1.0 + rng.random(n_coeffs)
    for k in params:
        if k.endswith(".bias"):
            params[k] = 0.1 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((5, n_frames, n_coeffs))
    y = rng.integers(0, cfg.n_classes, 5)
    masks = make_dropout_masks(cfg, 5, rng, dtype=np.float64)
    _, grads = loss_and_grads(params, cfg, x, y, masks)
    assert set(grads) == set(params) - set(NON_TRAINABLE)
    worst = {}
    for name, g in grads.items():
        p = params[name]
        entries = list(np.ndindex(p.shape))
        if max_entries is not None and len(entries) > max_entries:
            pick = rng.choice(len(entries), max_entries, replace=False)
            entries = [entries[i] for i in pick]
        errs = []
        for idx in entries:
            old = p[idx]
            p[idx] = old + eps
            lp, _ = loss_and_grads(params, cfg, x, y, masks)
            p[idx] = old - eps
            lm, _ = loss_and_grads(params, cfg, x, y, masks)
            p[idx] = old
            num = (lp - lm) / (2 * eps)
            errs.append(abs(num - g[idx]) / max(abs(num) + abs(g[idx]), 1e-12))
        worst[name] = max(errs)
    return worst


class TestGradients:
    @pytest.mark.parametrize("arch", list(Architecture))
    def test_every_parameter_small_batch(self, arch):
        cfg = ModelConfig(architecture=arch, **SMALL)
        worst = finite_difference_check(cfg, np.random.default_rng(1))
        assert max(worst.values()) <= 1e-4, worst

    def test_default_architecture_sampled_entries(self):
        cfg = ModelConfig(n_classes=3, input_shape=(24, 16), l2_lambda=0.05)
        worst = finite_difference_check(cfg, np.random.default_rng(2), max_entries=25)
        assert max(worst.values()) <= 1e-4, worst


def blobs(rng, n, n_classes=3, shape=(8, 10), sep=3.0):
    centres = sep * rng.standard_normal((n_classes, *shape))
    y = rng.integers(0, n_classes, n)
    return (centres[y] + rng.standard_normal((n, *shape))).astype(np.float32), y


class TestConfigs:
    def test_param_count_in_desk_range(self):
        model = TrainedModel(init_params(ModelConfig(), np.random.default_rng(0)), ModelConfig())
        assert 10_000 <= model.n_trainable() <= 50_000

    @pytest.mark.parametrize("kw", [
        {"n_classes": 1}, {"dropout_penultimate": 1.0}, {"dropout_pre_flatten": -0.1}, {"l2_lambda": -1.0},
        {"input_shape": (8, 10)},
    ])
    def test_invalid_model_config(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    @pytest.mark.parametrize("kw", [
        {"max_epochs": 10, "early_stop_patience": 10}, {"optimizer": "rmsprop"}, {"batch_size": 0},
        {"learning_rate": 0.0},
    ])
    def test_invalid_train_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTraining:
    def test_zero_epochs_is_initialisation(self, rng):
        cfg = ModelConfig(**SMALL)
        x, y = blobs(rng, 20)
        model = train(x, y, x, y, cfg, TrainConfig(max_epochs=0, seed=5))
        expected = init_params(cfg, _streams(5)[0])
        for k, v in expected.items():
            if k not in NON_TRAINABLE:
                assert np.array_equal(model.params[k], v)
        assert model.history == () and model.epochs_run == 0

    def test_linear_separable(self, rng):
        cfg = ModelConfig(architecture="linear_softmax", n_classes=2, input_shape=(8, 10))
        x, y = blobs(rng, 120, n_classes=2)
        model = train(x[:80], y[:80], x[80:], y[80:], cfg,
                      TrainConfig(learning_rate=1e-2, max_epochs=50, early_stop_patience=49, batch_size=16))
        assert max(r.val_accuracy for r in model.history) == 1.0
        assert evaluate_accuracy(model, x[80:], y[80:]) == 1.0

    def test_early_stopping_restores_best_bit_exactly(self, rng):
        cfg = ModelConfig(**SMALL)
        x, y = blobs(rng, 60, sep=0.3)
        model = train(x[:40], y[:40], x[40:], y[40:], cfg,
                      TrainConfig(learning_rate=3e-2, max_epochs=40, early_stop_patience=3, batch_size=8))
        losses = [r.val_loss for r in model.history]
        assert model.best_epoch == int(np.argmin(losses))
        assert dataset_loss(dict(model.params), cfg, x[40:], y[40:])[0] == min(losses)

    def test_determinism(self, rng):
        cfg = ModelConfig(**SMALL)
        x, y = blobs(rng, 40)
        tcfg = TrainConfig(learning_rate=1e-2, max_epochs=5, early_stop_patience=2, batch_size=8, seed=9)
        a = train(x[:30], y[:30], x[30:], y[30:], cfg, tcfg)
        b = train(x[:30], y[:30], x[30:], y[30:], cfg, tcfg)
        assert a.history == b.history
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
        c = train(x[:30], y[:30], x[30:], y[30:], cfg, TrainConfig(learning_rate=1e-2, max_epochs=5,
                                                                   early_stop_patience=2, batch_size=8, seed=10))
        assert not np.array_equal(a.params["out.kernel"], c.params["out.kernel"])

    def test_sgd_loss_monotone_on_convex_problem(self, rng):
        cfg = ModelConfig(architecture="linear_softmax", n_classes=3, input_shape=(8, 10))
        x, y = blobs(rng, 64, sep=0.5)
        tcfg = TrainConfig(optimizer="sgd", learning_rate=0.05, batch_size=64, max_epochs=60,
                           early_stop_patience=59)
        model = train(x, y, x, y, cfg, tcfg)
        losses = [r.train_loss for r in model.history]
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_diverged(self, rng):
        cfg = ModelConfig(**SMALL)
        x, y = blobs(rng, 10)
        x[3, 0, 0] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            train(x, y, x, y, ModelConfig(**{**SMALL, "standardize": False}), TrainConfig(max_epochs=2,
                                                                                        early_stop_patience=1))
        assert info.value.epoch == 0

    def test_input_validation(self, rng):
        cfg = ModelConfig(**SMALL)
        x, y = blobs(rng, 10)
        with pytest.raises(ShapeError):
            train(x[:, :7], y, x, y, cfg, TrainConfig(max_epochs=1, early_stop_patience=0))
        with pytest.raises(ValueError):
            train(x, y + 3, x, y, cfg, TrainConfig(max_epochs=1, early_stop_patience=0))


class TestInference:
    def _model(self, arch="small_conv", seed=0):
        cfg = ModelConfig(architecture=arch, **SMALL)
        return TrainedModel(init_params(cfg, np.random.default_rng(seed)), cfg)

    def test_zero_weight_linear_is_uniform(self):
        cfg = ModelConfig(architecture="linear_softmax", n_classes=4, input_shape=(8, 10))
        params = {k: np.zeros_like(v) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
        params["input_std"] = np.ones(10, dtype=np.float32)
        probs = predict(TrainedModel(params, cfg), FeatureMatrix(np.ones((8, 10)), 44100))
        assert np.allclose(probs, 0.25)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(list(Architecture)), st.floats(0.1, 100))
    def test_probabilities_normalised(self, seed, arch, scale):
        model = self._model(arch, seed % 7)
        x = scale * np.random.default_rng(seed).standard_normal((6, 8, 10))
        probs = predict_proba(model, x)
        assert np.all(probs >= 0) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_single_and_batch(self, rng):
        model = self._model()
        x = rng.standard_normal((3, 8, 10))
        assert predict(model, x[0]).shape == (3,)
        assert predict(model, FeatureMatrix(x[0], 44100)).shape == (3,)
        # batched BLAS may round float32 differently from a single row
        assert np.allclose(predict(model, x)[1], predict(model, x[1]), rtol=0, atol=1e-6)

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            predict(self._model(), rng.standard_normal((9, 10)))

    def test_dropout_off_at_inference(self, rng):
        model = self._model()
        x = rng.standard_normal((4, 8, 10))
        assert np.array_equal(predict_proba(model, x), predict_proba(model, x))

    def test_linear_argmax_scale_stable(self):
        # documented behaviour: with zero bias and mean-subtracted inputs, scaling keeps the argmax
        cfg = ModelConfig(architecture="linear_softmax", n_classes=5, input_shape=(8, 10), standardize=False)
        for seed in range(20):
            r = np.random.default_rng(seed)
            params = init_params(cfg, r)
            model = TrainedModel(params, cfg)
            x = r.standard_normal((10, 8, 10))
            x -= x.mean(axis=(1, 2), keepdims=True)
            base = predict_classes(model, x)
            for c in (0.1, 3.0, 50.0):
                assert np.array_equal(predict_classes(model, c * x), base)

    def test_accuracy(self, rng):
        model = self._model()
        x = rng.standard_normal((12, 8, 10))
        pred = predict_classes(model, x)
        assert evaluate_accuracy(model, x, pred) == 1.0
        assert evaluate_accuracy(model, x, (pred + 1) % 3) == 0.0
        with pytest.raises(EvaluationError):
            evaluate_accuracy(model, x[:0], [])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        cfg = ModelConfig(**SMALL)
        x, y = blobs(rng, 20)
        model = train(x, y, x, y, cfg, TrainConfig(max_epochs=2, early_stop_patience=1, batch_size=8))
        save_model(model, tmp_path / "m.ckpt")
        back = load_model(tmp_path / "m.ckpt")
        assert back.config == model.config and back.train_config == model.train_config
        assert back.history == model.history and back.best_epoch == model.best_epoch
        assert list(back.params) == list(model.params)
        for k in model.params:
            assert back.params[k].dtype == np.float32
            assert back.params[k].tobytes() == model.params[k].tobytes()
        save_model(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()

    def test_corrupt(self, tmp_path):
        cfg = ModelConfig(**SMALL)
        model = TrainedModel(init_params(cfg, np.random.default_rng(0)), cfg)
        save_model(model, tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        for i, bad in enumerate([b"NOTMODEL" + data[8:], data[:-3], data + b"\0"]):
            (tmp_path / f"b{i}").write_bytes(bad)
            with pytest.raises(CheckpointError):
                load_model(tmp_path / f"b{i}")

    def test_params_read_only(self):
        cfg = ModelConfig(**SMALL)
        model = TrainedModel(init_params(cfg, np.random.default_rng(0)), cfg)
        with pytest.raises(TypeError):
            model.params["out.bias"] = None
