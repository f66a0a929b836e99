"""Tests for layers.py: forward semantics, gradient checks and shape algebra."""

import math

import numpy as np
import pytest

from src.errors import ConfigurationError, RejectedInputError, UsageError
from src.layers import (
    LSTM,
    Conv2D,
    Dropout,
    Flatten,
    FullyConnected,
    LayerKind,
    LayerSpec,
    LSTMCell,
    ReLU,
    conv2d_forward,
    dropout_apply,
    fully_connected_forward,
    lstm_cell_step,
)
from src.tensor import numerical_gradient

RTOL = 1e-4
ATOL = 1e-7


def check_layer_gradients(layer, x, rng, training=False):
    """Compare backward() with central differences of sum(forward(x) * r)."""
    out = layer.forward(x, training)
    r = rng.normal(size=out.shape)

    def objective():
        return float(np.sum(layer.forward(x, training) * r))

    layer.zero_grad()
    layer.forward(x, training)
    dx = layer.backward(r)
    analytic = [p.grad.copy() for p in layer.parameters()]

    np.testing.assert_allclose(dx, numerical_gradient(objective, x), rtol=RTOL, atol=ATOL)
    for p, grad in zip(layer.parameters(), analytic):
        np.testing.assert_allclose(grad, numerical_gradient(objective, p.data), rtol=RTOL, atol=ATOL)


class TestConv2D:
    """Test convolution forward and backward."""

    def test_nic_shape_preserved(self):
        """Test that a 30x30x3 input with 10 5x5 filters gives 30x30x10."""
        layer = Conv2D(3, 10, (5, 5), np.random.default_rng(0))
        out = layer.forward(np.random.default_rng(1).random((2, 30, 30, 3)))
        assert out.shape == (2, 30, 30, 10)

    def test_zero_kernels_give_zero_output(self):
        """Test that zero kernels and bias give an all-zero output."""
        out = conv2d_forward(np.random.default_rng(0).random((6, 7, 2)), np.zeros((3, 3, 2, 4)), np.zeros(4))
        assert out.shape == (6, 7, 4)
        assert not out.any()

    def test_ones_window_sums(self):
        """Test that zero-padded window sums are 9 in the centre, 6 on edges and 4 in corners."""
        out = conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))[:, :, 0]
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float64)
        np.testing.assert_array_equal(out, expected)

    def test_one_by_one_kernel_gradient_is_input(self):
        """Test that for a 1x1x1 input and 1x1 kernel d(out)/d(kernel) is the input value."""
        layer = Conv2D.from_arrays(np.full((1, 1, 1, 1), 0.3), np.zeros(1))
        layer.forward(np.full((1, 1, 1, 1), 2.5))
        layer.backward(np.ones((1, 1, 1, 1)))
        assert layer.kernels.grad.item() == 2.5

    def test_zero_upstream_gradient(self):
        """Test that a zero upstream gradient leaves all parameter gradients zero."""
        layer = Conv2D(2, 3, (3, 3), np.random.default_rng(0))
        layer.forward(np.random.default_rng(1).random((2, 4, 5, 2)))
        layer.backward(np.zeros((2, 4, 5, 3)))
        assert not layer.kernels.grad.any()
        assert not layer.bias.grad.any()

    @pytest.mark.parametrize("seed", range(12))
    def test_gradients_match_finite_differences(self, seed):
        """Test that conv gradients match central differences on random small instances."""
        rng = np.random.default_rng(seed)
        kh, kw = rng.choice([1, 3, 5], size=2)
        cin, cout = rng.integers(1, 4, size=2)
        h, w = rng.integers(1, 7, size=2)
        layer = Conv2D(int(cin), int(cout), (int(kh), int(kw)), rng)
        layer.bias.data[...] = rng.normal(size=layer.bias.dims)
        check_layer_gradients(layer, rng.normal(size=(2, int(h), int(w), int(cin))), rng)

    def test_backward_without_forward(self):
        """Test that backward before forward raises UsageError."""
        with pytest.raises(UsageError):
            Conv2D(1, 1, (3, 3)).backward(np.zeros((1, 2, 2, 1)))

    def test_channel_mismatch(self):
        """Test that an input with the wrong channel count is rejected."""
        with pytest.raises(RejectedInputError, match="Conv2D expects"):
            Conv2D(3, 2, (3, 3)).forward(np.zeros((1, 4, 4, 2)))

    def test_even_kernel_rejected(self):
        """Test that even kernel sizes are a configuration error."""
        with pytest.raises(ConfigurationError, match="odd"):
            Conv2D(1, 1, (4, 3))


class TestFullyConnected:
    """Test fully connected forward and backward."""

    def test_hand_multiply(self):
        """Test that weights [[1,2],[3,4]] times [1,1] give [3,7]."""
        out = fully_connected_forward(np.array([1.0, 1.0]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))
        np.testing.assert_array_equal(out, [3.0, 7.0])

    def test_identity(self):
        """Test that identity weights and zero bias return the input."""
        x = np.random.default_rng(0).normal(size=5)
        np.testing.assert_array_equal(fully_connected_forward(x, np.eye(5), np.zeros(5)), x)

    def test_dimension_mismatch(self):
        """Test that a wrong-length input is rejected."""
        with pytest.raises(RejectedInputError):
            fully_connected_forward(np.ones(3), np.ones((2, 2)), np.zeros(2))

    @pytest.mark.parametrize("seed", range(12))
    def test_gradients_match_finite_differences(self, seed):
        """Test that FC gradients match central differences."""
        rng = np.random.default_rng(100 + seed)
        n, m = rng.integers(1, 9, size=2)
        layer = FullyConnected(int(n), int(m), rng)
        layer.bias.data[...] = rng.normal(size=layer.bias.dims)
        check_layer_gradients(layer, rng.normal(size=(3, int(n))), rng)


class TestActivations:
    """Test ReLU, Flatten and Dropout."""

    def test_relu_gradient_away_from_kink(self):
        """Test that ReLU gradients match central differences away from zero."""
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 5))
        x = np.where(np.abs(x) < 0.1, 0.5, x)
        check_layer_gradients(ReLU(), x, rng)

    def test_flatten_roundtrip_gradient(self):
        """Test that Flatten reshapes forward and restores the shape backward."""
        layer = Flatten()
        x = np.arange(24.0).reshape(2, 3, 2, 2)
        assert layer.forward(x).shape == (2, 12)
        assert layer.backward(np.ones((2, 12))).shape == x.shape

    def test_dropout_rate_zero_identity(self):
        """Test that rate 0 is the identity in both modes."""
        x = np.random.default_rng(0).normal(size=(3, 4))
        rng = np.random.default_rng(1)
        np.testing.assert_array_equal(dropout_apply(x, 0.0, rng, training=True), x)
        np.testing.assert_array_equal(dropout_apply(x, 0.0, rng, training=False), x)

    def test_dropout_inference_identity(self):
        """Test that inference mode with rate 0.2 returns the input exactly."""
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(dropout_apply(x, 0.2, np.random.default_rng(1), training=False), x)

    def test_dropout_zero_fraction(self):
        """Test that rate 0.2 zeroes 0.2 +/- 0.005 of a million elements and scales survivors."""
        out = dropout_apply(np.ones(1_000_000), 0.2, np.random.default_rng(42), training=True)
        assert abs(np.mean(out == 0.0) - 0.2) < 0.005
        np.testing.assert_allclose(out[out != 0.0], 1.25)

    def test_dropout_backward_uses_mask(self):
        """Test that dropout backward applies the same mask and scale."""
        layer = Dropout(0.5, np.random.default_rng(0))
        out = layer.forward(np.ones((10, 10)), training=True)
        np.testing.assert_array_equal(layer.backward(np.ones((10, 10))), out)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_dropout_rate_range(self, rate):
        """Test that rates outside [0, 1) are rejected."""
        with pytest.raises(ConfigurationError, match="Dropout rate"):
            Dropout(rate)


def scalar_lstm_step(x, h_prev, c_prev, weights, bias):
    """Loop-by-loop reimplementation of one LSTM step."""
    hs = len(h_prev)
    z = list(x) + list(h_prev)

    def sigmoid(a):
        return 1.0 / (1.0 + math.exp(-a))

    h = np.zeros(hs)
    c = np.zeros(hs)
    for k in range(hs):
        acts = []
        for gate in range(4):
            row = gate * hs + k
            acts.append(bias[row] + sum(weights[row, j] * z[j] for j in range(len(z))))
        f, i, o = sigmoid(acts[0]), sigmoid(acts[1]), sigmoid(acts[2])
        g = math.tanh(acts[3])
        c[k] = f * c_prev[k] + i * g
        h[k] = o * math.tanh(c[k])
    return h, c


class TestLSTMCell:
    """Test the LSTM cell step and its gradients."""

    def test_all_zero_parameters(self):
        """Test that zero parameters and zero cell state give zero outputs."""
        h, c = lstm_cell_step(np.ones(3), np.ones(2), np.zeros(2), np.zeros((8, 5)), np.zeros(8))
        np.testing.assert_array_equal(h, np.zeros(2))
        np.testing.assert_array_equal(c, np.zeros(2))

    def test_saturated_forget_gate_keeps_cell(self):
        """Test that forget bias 50 with zero weights keeps c close to c_prev."""
        bias = np.zeros(8)
        bias[:2] = 50.0
        c_prev = np.array([0.7, -1.3])
        _, c = lstm_cell_step(np.ones(3), np.zeros(2), c_prev, np.zeros((8, 5)), bias)
        np.testing.assert_allclose(c, c_prev, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_reimplementation(self, seed):
        """Test that the vectorized step matches a scalar loop to 1e-12."""
        rng = np.random.default_rng(seed)
        n, hs = 4, 3
        weights = rng.normal(size=(4 * hs, n + hs))
        bias = rng.normal(size=4 * hs)
        x, h_prev, c_prev = rng.normal(size=n), rng.normal(size=hs), rng.normal(size=hs)
        h, c = lstm_cell_step(x, h_prev, c_prev, weights, bias)
        h_ref, c_ref = scalar_lstm_step(x, h_prev, c_prev, weights, bias)
        np.testing.assert_allclose(h, h_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(c, c_ref, rtol=0, atol=1e-12)

    def test_forget_bias_initialized_to_one(self):
        """Test that the forget-gate bias rows start at +1 and the rest at 0."""
        cell = LSTMCell(3, 4)
        np.testing.assert_array_equal(cell.bias.data[:4], np.ones(4))
        np.testing.assert_array_equal(cell.bias.data[4:], np.zeros(12))

    def test_parameter_shape_mismatch(self):
        """Test that inconsistent parameters are rejected."""
        with pytest.raises(RejectedInputError):
            lstm_cell_step(np.ones(3), np.zeros(2), np.zeros(2), np.zeros((8, 5)), np.zeros(7))


class TestLSTMSequence:
    """Test the unrolled LSTM layer."""

    @pytest.mark.parametrize("seed", range(12))
    def test_gradients_match_finite_differences(self, seed):
        """Test that BPTT gradients match central differences."""
        rng = np.random.default_rng(200 + seed)
        f, hs, steps = rng.integers(1, 6, size=3)
        layer = LSTM(int(f), int(hs), rng)
        layer.cell.bias.data[...] = rng.normal(size=layer.cell.bias.dims)
        check_layer_gradients(layer, rng.normal(size=(2, int(steps), int(f))), rng)

    def test_output_shape(self):
        """Test that N x T x F input gives N x T x H output."""
        out = LSTM(6, 4, np.random.default_rng(0)).forward(np.zeros((3, 5, 6)))
        assert out.shape == (3, 5, 4)

    def test_backward_without_forward(self):
        """Test that backward before forward raises UsageError."""
        with pytest.raises(UsageError):
            LSTM(2, 2).backward(np.zeros((1, 1, 2)))


class TestLayerSpec:
    """Test layer hyperparameter validation."""

    def test_builds_each_kind(self):
        """Test that valid specs build the matching layer kind."""
        rng = np.random.default_rng(0)
        specs = [
            LayerSpec(LayerKind.CONV2D, kernel=(5, 5), filters=10, in_channels=3),
            LayerSpec(LayerKind.FULLY_CONNECTED, in_features=9000, out_features=900),
            LayerSpec(LayerKind.LSTM_CELL, in_features=900, hidden_size=900),
            LayerSpec(LayerKind.DROPOUT, rate=0.2),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.FLATTEN),
        ]
        assert [s.build(rng).kind for s in specs] == [s.kind for s in specs]

    def test_invalid_specs(self):
        """Test that even kernels, zero counts and rate 1 are rejected."""
        with pytest.raises(ConfigurationError):
            LayerSpec(LayerKind.CONV2D, kernel=(2, 3), filters=1, in_channels=1).validate()
        with pytest.raises(ConfigurationError):
            LayerSpec(LayerKind.FULLY_CONNECTED, in_features=0, out_features=2).validate()
        with pytest.raises(ConfigurationError):
            LayerSpec(LayerKind.DROPOUT, rate=1.0).validate()
