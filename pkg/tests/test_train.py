import math

import numpy as np
import numpy.testing as npt
import pytest

from dermswin.checkpoint import load_checkpoint
from dermswin.data import index_dataset, make_synthetic_dataset
from dermswin.errors import ConfigError, NumericError
from dermswin.gradcheck import check_gradients
from dermswin.model import ModelConfig, PatchConfig, init_model, named_parameters
from dermswin.tensor import Tensor
from dermswin.train import (
    OptimState,
    TrainConfig,
    adam_step,
    cross_entropy,
    evaluate,
    init_optim_state,
    lr_schedule,
    train,
)


def tiny_model_config(num_classes=5, dropout=0.1):
    return ModelConfig(
        patch=PatchConfig(image_h=16, image_w=16, patch_size=4, embed_dim=8),
        depths=(2,),
        heads=(2,),
        window=2,
        expansion=2,
        kernel=3,
        num_classes=num_classes,
        head_dropout=dropout,
    )


@pytest.fixture(scope="module")
def tiny_index(tmp_path_factory):
    root = make_synthetic_dataset(
        tmp_path_factory.mktemp("data"), counts={f"c{i}": 10 for i in range(5)}, size=16
    )
    return index_dataset(root)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr0 == 1e-3
        assert cfg.weight_decay == 0.04
        assert cfg.decay_factor == 0.85
        assert cfg.decay_interval == 20
        assert cfg.batch_size == 16

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(decay_factor=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(lr0=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(decay_mode="cosine")
        with pytest.raises(ConfigError):
            TrainConfig(class_weights=(1.0, -1.0))
        with pytest.raises(ConfigError):
            TrainConfig(grad_clip=0.0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 5)))
        assert cross_entropy(logits, [0, 2, 4]).item() == pytest.approx(math.log(5), abs=1e-12)

    def test_confident_correct(self):
        logits = Tensor(np.array([[30.0, 0.0, 0.0]]))
        assert cross_entropy(logits, [0]).item() < 1e-12

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        labels = np.array([0, 2, 1, 2])
        loss = cross_entropy(logits, labels)
        loss.backward()
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.eye(3)[labels]
        npt.assert_allclose(logits.grad, (probs - onehot) / 4, atol=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        labels = np.array([1, 3, 0])
        result = check_gradients(lambda: cross_entropy(logits, labels), [("logits", logits)], tol=1e-6)
        assert result.passed, result.worst()

    def test_weighted_mean(self):
        logits = Tensor(np.array([[2.0, -1.0], [0.5, 1.5]]))
        plain0 = cross_entropy(logits[0:1], [0]).item()
        plain1 = cross_entropy(logits[1:2], [1]).item()
        weighted = cross_entropy(logits, [0, 1], class_weights=(2.0, 1.0)).item()
        assert weighted == pytest.approx((2 * plain0 + 1 * plain1) / 3, rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_weight_length_checked(self):
        with pytest.raises(ValueError, match="class_weights"):
            cross_entropy(Tensor(np.zeros((1, 3))), [0], class_weights=(1.0, 1.0))


class TestLrSchedule:
    def test_stated_values(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 1e-3
        assert lr_schedule(19, cfg) == 1e-3
        assert lr_schedule(20, cfg) == 8.5e-4
        assert lr_schedule(40, cfg) == pytest.approx(7.225e-4, rel=1e-15)

    def test_piecewise_constant_with_interval_breakpoints(self):
        cfg = TrainConfig()
        values = [lr_schedule(e, cfg) for e in range(101)]
        for e in range(1, 101):
            assert values[e] <= values[e - 1]
            if values[e] != values[e - 1]:
                assert e % 20 == 0

    def test_negative_epoch(self):
        with pytest.raises(ConfigError):
            lr_schedule(-1, TrainConfig())


class TestAdamStep:
    def _single(self, value, grad):
        p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
        p.grad = np.array([grad], dtype=np.float64)
        named = [("p", p)]
        state = OptimState(m={"p": np.zeros(1)}, v={"p": np.zeros(1)})
        return p, named, state

    def test_zero_gradient_zero_decay_is_identity(self):
        p, named, state = self._single(3.5, 0.0)
        before = p.data.copy()
        adam_step(named, state, lr=1e-3)
        npt.assert_array_equal(p.data, before)

    def test_missing_gradient_skipped(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        state = OptimState(m={"p": np.zeros(1)}, v={"p": np.zeros(1)})
        adam_step([("p", p)], state, lr=1e-3)
        npt.assert_array_equal(p.data, [2.0])

    def test_first_step_magnitude(self):
        # m=0.1/0.1=1, v=0.001/0.001=1, so the step is lr/(1+eps).
        lr, eps = 1e-2, 1e-8
        p, named, state = self._single(1.0, 1.0)
        adam_step(named, state, lr=lr, eps=eps)
        assert p.data[0] == pytest.approx(1.0 - lr / (1.0 + eps), rel=1e-15)
        assert p.data[0] == pytest.approx(1.0 - lr, rel=1e-6)

    def test_descends_quadratic(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        state = OptimState(m={"p": np.zeros(1)}, v={"p": np.zeros(1)})
        losses = []
        for _ in range(2):
            losses.append(0.5 * float(p.data[0]) ** 2)
            p.grad = p.data.copy()  # d/dx of x^2/2
            adam_step([("p", p)], state, lr=0.1)
        assert 0.5 * float(p.data[0]) ** 2 < losses[0]

    def test_zero_decay_bitwise_same_in_both_modes(self):
        rng = np.random.default_rng(2)
        results = []
        for mode in ("decoupled", "l2"):
            p = Tensor(rng.standard_normal(6), requires_grad=True)
            p.data = np.arange(6, dtype=np.float64) / 7
            p.grad = np.linspace(-1, 1, 6)
            state = OptimState(m={"p": np.zeros(6)}, v={"p": np.zeros(6)})
            adam_step([("p", p)], state, lr=1e-3, weight_decay=0.0, decay_mode=mode)
            results.append(p.data.copy())
        npt.assert_array_equal(results[0], results[1])

    def test_modes_differ_with_decay(self):
        results = []
        for mode in ("decoupled", "l2"):
            p = Tensor(np.array([1.0]), requires_grad=True)
            p.grad = np.array([0.5])
            state = OptimState(m={"p": np.zeros(1)}, v={"p": np.zeros(1)})
            adam_step([("p", p)], state, lr=1e-2, weight_decay=0.1, decay_mode=mode)
            results.append(float(p.data[0]))
        assert results[0] != results[1]

    def test_decoupled_decay_shrinks_before_update(self):
        p, named, state = self._single(1.0, 0.0)
        adam_step(named, state, lr=0.5, weight_decay=0.2)
        assert p.data[0] == pytest.approx(0.9, rel=1e-15)

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.zeros(2)
        state = OptimState(m={"p": np.zeros(3)}, v={"p": np.zeros(3)})
        with pytest.raises(ValueError, match="shape"):
            adam_step([("p", p)], state, lr=1e-3)

    def test_moments_stay_finite(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimState(m={"p": np.zeros(1)}, v={"p": np.zeros(1)})
        rng = np.random.default_rng(3)
        for _ in range(50):
            p.grad = rng.standard_normal(1) * 100
            adam_step([("p", p)], state, lr=1e-2)
        assert np.isfinite(state.m["p"]).all() and np.isfinite(state.v["p"]).all()


class TestTrainLoop:
    def test_overfits_solid_colors(self, tiny_index):
        config = tiny_model_config(dropout=0.0)
        params = init_model(config, seed=0)
        cfg = TrainConfig(epochs=100, batch_size=16, seed=0, weight_decay=0.0)
        result = train(params, config, tiny_index, cfg)
        assert len(result.step_losses) <= 200
        outcome = evaluate(result.params, config, tiny_index, "train")
        from dermswin.metrics import accuracy

        assert accuracy(outcome.confusion) >= 99.0
        # Loss falls once smoothed over 10-step windows.
        smoothed = [
            float(np.mean(result.step_losses[i : i + 10]))
            for i in range(0, len(result.step_losses) - 9, 10)
        ]
        assert smoothed[-1] < smoothed[0]

    def test_zero_epochs_keeps_initialization(self, tiny_index, tmp_path):
        config = tiny_model_config()
        params = init_model(config, seed=3)
        reference = init_model(config, seed=3)
        cfg = TrainConfig(epochs=0, seed=0)
        result = train(params, config, tiny_index, cfg, checkpoint_dir=tmp_path)
        assert result.history == []
        assert result.best_epoch is None
        loaded = load_checkpoint(tmp_path / "best.ckpt")
        for (name, got), (_, want) in zip(
            named_parameters(loaded.params), named_parameters(reference)
        ):
            npt.assert_array_equal(got.data, want.data, err_msg=name)

    def test_same_seed_bit_identical(self, tiny_index, tmp_path):
        config = tiny_model_config()
        cfg = TrainConfig(epochs=3, seed=11)
        runs = []
        for attempt in range(2):
            params = init_model(config, seed=1)
            out_dir = tmp_path / f"run{attempt}"
            runs.append(train(params, config, tiny_index, cfg, checkpoint_dir=out_dir))
        assert runs[0].history == runs[1].history
        assert runs[0].step_losses == runs[1].step_losses
        a = (tmp_path / "run0" / "best.ckpt").read_bytes()
        b = (tmp_path / "run1" / "best.ckpt").read_bytes()
        assert a == b

    def test_history_records(self, tiny_index):
        config = tiny_model_config()
        params = init_model(config, seed=0)
        seen = []
        result = train(
            params, config, tiny_index, TrainConfig(epochs=2, seed=0), on_epoch=seen.append
        )
        assert [r["epoch"] for r in result.history] == [0, 1]
        assert seen == result.history
        for record in result.history:
            assert set(record) == {"epoch", "lr", "train_loss", "val_acc", "val_f1"}
            assert 0.0 <= record["val_acc"] <= 100.0
            assert 0.0 <= record["val_f1"] <= 1.0
            assert record["lr"] == 1e-3

    def test_best_tie_prefers_earlier_epoch(self, tiny_index):
        config = tiny_model_config()
        params = init_model(config, seed=0)
        # A vanishing learning rate freezes the model, so every epoch ties.
        cfg = TrainConfig(epochs=3, seed=0, lr0=1e-12, weight_decay=0.0)
        result = train(params, config, tiny_index, cfg)
        f1s = [r["val_f1"] for r in result.history]
        assert f1s[0] == f1s[1] == f1s[2]
        assert result.best_epoch == 0

    def test_nan_loss_aborts_with_diagnostics(self, tiny_index):
        config = tiny_model_config()
        params = init_model(config, seed=0)
        params.head_b.data[:] = np.nan
        with pytest.raises(NumericError, match="epoch 0 step 0"):
            train(params, config, tiny_index, TrainConfig(epochs=1, seed=0))

    def test_class_weight_length_checked(self, tiny_index):
        config = tiny_model_config()
        params = init_model(config, seed=0)
        with pytest.raises(ConfigError, match="class_weights"):
            train(params, config, tiny_index, TrainConfig(epochs=1, class_weights=(1.0, 2.0)))

    def test_last_checkpoint_carries_moments(self, tiny_index, tmp_path):
        config = tiny_model_config()
        params = init_model(config, seed=0)
        train(params, config, tiny_index, TrainConfig(epochs=1, seed=0), checkpoint_dir=tmp_path)
        last = load_checkpoint(tmp_path / "last.ckpt")
        assert last.moments
        assert last.extra["kind"] == "last"
        best = load_checkpoint(tmp_path / "best.ckpt")
        assert not best.moments
        assert best.extra["kind"] == "best"


class TestEvaluate:
    def test_collect_features(self, tiny_index):
        config = tiny_model_config()
        params = init_model(config, seed=0)
        outcome = evaluate(params, config, tiny_index, "val", collect_features=True)
        n = outcome.labels.shape[0]
        assert outcome.features.shape == (n, 8)
        assert outcome.scored.probabilities.shape == (n, 5)
        npt.assert_allclose(outcome.scored.probabilities.sum(axis=1), 1.0, atol=1e-9)
        assert outcome.confusion.total == n

    def test_deterministic(self, tiny_index):
        config = tiny_model_config()
        params = init_model(config, seed=0)
        a = evaluate(params, config, tiny_index, "val")
        b = evaluate(params, config, tiny_index, "val")
        npt.assert_array_equal(a.scored.probabilities, b.scored.probabilities)
        npt.assert_array_equal(a.confusion.counts, b.confusion.counts)
