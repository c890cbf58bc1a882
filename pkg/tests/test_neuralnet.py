"""
Tests for layers, networks, optimizers, training and gradient checks.
"""

import logging

import numpy as np
import pytest

from src.architectures import classifier_specs, denoiser, hpc_classifier, regression_model
from src.layers import Conv1d, NetworkError, TransposedConv1d
from src.models import LayerKind, LayerSpec, LossKind, OptimizerKind, TrainConfig
from src.network import Network
from src.optimizers import AdaBound
from src.training import (
    TrainingDivergedError,
    accuracy,
    gradient_check,
    loss_gradient,
    loss_value,
    train,
)


def dense(i, o):
    return LayerSpec(kind=LayerKind.DENSE, in_features=i, out_features=o)


def bn(n):
    return LayerSpec(kind=LayerKind.BATCH_NORM, num_features=n)


LEAKY = LayerSpec(kind=LayerKind.LEAKY_RELU)
SIGMOID = LayerSpec(kind=LayerKind.SIGMOID)


def conv(c_in, c_out, stride=1, padding=(1, 2)):
    return LayerSpec(kind=LayerKind.CONV1D, in_channels=c_in, out_channels=c_out, stride=stride, padding=padding)


def tconv(c_in, c_out, stride=2, padding=(1, 1)):
    return LayerSpec(
        kind=LayerKind.TRANSPOSED_CONV1D, in_channels=c_in, out_channels=c_out, stride=stride, padding=padding
    )


POOL = LayerSpec(kind=LayerKind.MAX_POOL1D)


def separable_set(n=200, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    centers = np.where(labels[:, None] == 1, 2.0, -2.0)
    x = (centers + rng.normal(0, 0.5, (n, 2))).astype(np.float32)
    return x, np.eye(2, dtype=np.float32)[labels]


class TestForward:
    def test_identity_dense(self):
        net = Network([dense(4, 4)], (4,))
        net.layers[0].params["weight"] = np.eye(4, dtype=np.float32)
        net.layers[0].params["bias"] = np.zeros(4, dtype=np.float32)
        x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        np.testing.assert_array_equal(net.predict(x), x)

    def test_sigmoid_at_zero(self):
        net = Network([SIGMOID], (2,))
        np.testing.assert_array_equal(net.predict(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_leaky_relu_negative(self):
        net = Network([LEAKY], (1,))
        assert net.predict(np.array([[-1.0]]))[0, 0] == pytest.approx(-0.01)

    def test_input_shape_mismatch_names_layer(self):
        net = Network([dense(4, 2)], (4,))
        with pytest.raises(NetworkError, match="Layer 0"):
            net.forward(np.zeros((2, 5)))

    def test_inconsistent_specs_name_layer(self):
        with pytest.raises(NetworkError, match="Layer 1"):
            Network([dense(4, 3), dense(5, 2)], (4,))

    def test_backward_before_forward(self):
        net = Network([dense(2, 2)], (2,)).train()
        with pytest.raises(NetworkError, match="before"):
            net.backward(np.zeros((1, 2)))

    def test_eval_forward_is_deterministic(self):
        net = hpc_classifier(10, 3, hidden=(8,), seed=1)
        x = np.random.default_rng(1).normal(size=(5, 10))
        np.testing.assert_array_equal(net.predict(x), net.predict(x))

    def test_sigmoid_head_in_open_interval(self):
        net = hpc_classifier(10, 3, hidden=(8, 4), seed=2)
        out = net.predict(np.random.default_rng(2).normal(size=(20, 10)))
        assert out.shape == (20, 3)
        assert np.all((out > 0) & (out < 1))


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        net = Network([bn(4)], (4,), dtype=np.float64).train()
        x = np.random.default_rng(0).normal(5.0, 100.0, size=(64, 4))
        out = net.forward(x)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-6)

    def test_eval_uses_running_statistics(self):
        net = Network([bn(3)], (3,), dtype=np.float64).train()
        net.forward(np.random.default_rng(0).normal(2.0, 3.0, size=(32, 3)))
        net.eval()
        x = np.ones((1, 3))
        layer = net.layers[0]
        expected = (x - layer.buffers["running_mean"]) / np.sqrt(layer.buffers["running_var"] + 1e-5)
        np.testing.assert_allclose(net.forward(x), expected, rtol=1e-12)

    def test_channel_norm_on_sequences(self):
        net = Network([bn(2)], (2, 10), dtype=np.float64).train()
        x = np.random.default_rng(1).normal(3.0, 50.0, size=(8, 20))
        out = net.forward(x).reshape(8, 2, 10)
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-6)


def dense_net():
    return Network([dense(6, 5), bn(5), LEAKY, dense(5, 3), SIGMOID], (6,), seed=3)


def conv_net():
    return Network([conv(1, 2), bn(2), LEAKY, POOL, tconv(2, 2), conv(2, 1), SIGMOID], (1, 16), seed=4)


def strided_net():
    return Network([conv(1, 3, stride=2, padding=(1, 1)), LEAKY, tconv(3, 1, stride=2, padding=(1, 1))], (1, 16), seed=5)


def regression_net():
    return Network([dense(4, 6), LEAKY, dense(6, 2)], (4,), seed=6)


class TestGradients:
    @pytest.mark.parametrize("builder,loss,out_dim", [
        (dense_net, LossKind.BCE, 3),
        (conv_net, LossKind.MSE, 16),
        (strided_net, LossKind.MSE, 16),
        (regression_net, LossKind.MSE, 2),
    ])
    def test_matches_finite_differences(self, builder, loss, out_dim):
        net = builder()
        assert net.n_parameters <= 1000
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, net.input_dim))
        y = rng.uniform(size=(4, out_dim))
        if loss == LossKind.BCE:
            y = np.eye(out_dim)[rng.integers(0, out_dim, 4)]
        result = gradient_check(net, x, y, loss)
        assert result.passed, result.relative_errors

    def test_zero_loss_gradient_gives_zero_grads(self):
        net = dense_net().train()
        out = net.forward(np.random.default_rng(0).normal(size=(4, 6)))
        net.backward(np.zeros_like(out))
        for _, layer, name in net.parameters():
            assert not np.any(layer.grads[name])

    def test_mse_on_exact_prediction(self):
        pred = np.array([[0.2, 0.7]], dtype=np.float32)
        assert loss_value(LossKind.MSE, pred, pred) == 0.0
        assert not np.any(loss_gradient(LossKind.MSE, pred, pred))

    def test_bce_non_negative_and_zero_when_perfect(self):
        target = np.eye(3)
        assert loss_value(LossKind.BCE, target, target) == 0.0
        assert loss_value(LossKind.BCE, np.full((3, 3), 0.4), target) > 0.0


class TestTransposedConvAdjoint:
    def test_inner_products_match(self):
        rng = np.random.default_rng(0)
        spec = conv(3, 2, stride=3, padding=(1, 1))
        forward = Conv1d(spec, rng, dtype=np.float64)
        adjoint = TransposedConv1d(tconv(2, 3, stride=3, padding=(1, 1)), rng, dtype=np.float64)
        adjoint.params["weight"] = forward.params["weight"].copy()
        forward.params["bias"][:] = 0.0
        adjoint.params["bias"][:] = 0.0

        x = rng.normal(size=(2, 3, 17))
        cx = forward.forward(x, training=False)
        y = rng.normal(size=cx.shape)
        ty = adjoint.forward(y, training=False)
        assert ty.shape == x.shape
        assert np.sum(cx * y) == pytest.approx(np.sum(x * ty), abs=1e-10)


class TestTraining:
    def test_learns_separable_set(self):
        x, y = separable_set()
        net = Network(classifier_specs(2, 2, hidden=(16,)), (2,), seed=0)
        cfg = TrainConfig(loss=LossKind.BCE, lr_initial=0.02, epochs=50, batch_size=16, seed=0)
        history = train(net, x, y, cfg)
        assert len(history.records) == 50
        assert accuracy(net.predict(x), y) >= 0.99

    def test_zero_learning_rate_keeps_parameters(self):
        x, y = separable_set(40)
        net = Network(classifier_specs(2, 2, hidden=(4,)), (2,), seed=1)
        before = {k: layer.params[name].copy() for k, layer, name in net.parameters()}
        for kind in (OptimizerKind.ADABOUND, OptimizerKind.ADAM):
            train(net, x, y, TrainConfig(lr_initial=0.0, epochs=2, batch_size=8, optimizer=kind))
        for k, layer, name in net.parameters():
            np.testing.assert_array_equal(layer.params[name], before[k])

    def test_identical_seeds_identical_weights(self):
        x, y = separable_set(60)
        cfg = TrainConfig(lr_initial=0.01, epochs=3, batch_size=8, seed=5)
        nets = [Network(classifier_specs(2, 2, hidden=(8,)), (2,), seed=2) for _ in range(2)]
        for net in nets:
            train(net, x, y, cfg)
        a, b = (net.state_dict() for net in nets)
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])

    def test_divergence_restores_weights(self):
        x, y = separable_set(16)
        x[3, 0] = np.nan
        net = Network(classifier_specs(2, 2, hidden=(4,)), (2,), seed=1)
        before = net.state_dict()
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(net, x, y, TrainConfig(lr_initial=0.01, epochs=2, batch_size=16))
        assert excinfo.value.epoch == 0
        for key, value in net.state_dict().items():
            np.testing.assert_array_equal(value, before[key])

    def test_zero_epochs_warns(self, caplog):
        x, y = separable_set(8)
        net = Network(classifier_specs(2, 2, hidden=(4,)), (2,), seed=1)
        with caplog.at_level(logging.WARNING):
            history = train(net, x, y, TrainConfig(epochs=0))
        assert history.records == []
        assert "0 epochs" in caplog.text

    def test_empty_dataset(self):
        net = Network([dense(2, 2)], (2,))
        with pytest.raises(NetworkError, match="empty"):
            train(net, np.zeros((0, 2)), np.zeros((0, 2)), TrainConfig())

    def test_validation_history(self):
        x, y = separable_set(50)
        net = Network(classifier_specs(2, 2, hidden=(4,)), (2,), seed=1)
        history = train(net, x[:40], y[:40], TrainConfig(lr_initial=0.01, epochs=2, batch_size=8), x[40:], y[40:])
        frame = history.to_frame()
        assert list(frame["epoch"]) == [0, 1]
        assert frame["val_accuracy"].notna().all()
        assert frame["lr"].iloc[1] == pytest.approx(0.01 * 0.75)


class TestSchedulesAndBounds:
    def test_learning_rate_decay(self):
        cfg = TrainConfig(lr_initial=1.5e-4, lr_decay_per_epoch=0.5)
        assert cfg.lr_for_epoch(0) == 1.5e-4
        assert cfg.lr_for_epoch(2) == pytest.approx(1.5e-4 * 0.25)

    def test_decay_range_enforced(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_per_epoch=0.6)

    def test_adabound_bounds_converge_to_final_lr(self):
        opt = AdaBound(Network([dense(2, 2)], (2,)), lr=1e-3, final_lr=0.1)
        opt.step_count = 1
        lower, upper = opt.bounds()
        assert lower < 0.001 and upper > 10.0
        opt.step_count = 10 ** 8
        lower, upper = opt.bounds()
        assert lower == pytest.approx(0.1, rel=1e-3) and upper == pytest.approx(0.1, rel=1e-3)


class TestArchitectures:
    def test_denoiser_preserves_length(self):
        net = denoiser(1000, seed=0)
        out = net.predict(np.random.default_rng(0).uniform(size=(2, 1000)))
        assert out.shape == (2, 1000)
        assert np.all((out >= 0) & (out <= 1))

    def test_denoiser_window_divisibility(self):
        with pytest.raises(NetworkError, match="divisible by 8"):
            denoiser(1001)

    def test_regression_has_two_linear_outputs(self):
        net = regression_model(30, hidden=(8,))
        assert net.output_dim == 2
        assert net.specs[-1].kind == LayerKind.DENSE

    def test_classifier_width(self):
        net = hpc_classifier(825, 3)
        assert net.output_dim == 3
        assert [s.out_features for s in net.specs if s.kind == LayerKind.DENSE] == [1024, 512, 256, 3]
