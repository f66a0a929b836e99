"""Layers of the minimal dense-tensor engine.

Every layer works on mini-batches with the batch on axis 0, caches what its
backward pass needs, and accumulates parameter gradients into ``Tensor.grad``.
Images use NHWC layout.
"""

from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, RejectedInputError, UsageError
from .tensor import Tensor


class LayerKind(IntEnum):
    """Layer kinds; values double as the checkpoint kind tag."""
    CONV2D = 1
    FULLY_CONNECTED = 2
    LSTM_CELL = 3
    RELU = 4
    DROPOUT = 5
    FLATTEN = 6


class Layer:
    """Base class: forward caches, backward consumes the cache."""

    kind: LayerKind

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Output for a batch; ``training`` enables stochastic layers."""
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Gradient with respect to the last forward input; accumulates parameter gradients."""
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        return []

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-uniform draw on [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2D(Layer):
    """Stride-1 convolution with zero "same" padding; kernels are kh x kw x Cin x Cout."""

    kind = LayerKind.CONV2D

    def __init__(self, in_channels: int, filters: int, kernel: Tuple[int, int] = (5, 5),
                 rng: Optional[np.random.Generator] = None):
        kh, kw = kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"Conv kernel dims must be odd and >= 1, got {kernel}")
        if in_channels < 1 or filters < 1:
            raise ConfigurationError("Conv channel and filter counts must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = kh * kw * in_channels
        self.kernels = Tensor(_kaiming_uniform(rng, (kh, kw, in_channels, filters), fan_in), name="conv.kernels")
        self.bias = Tensor(np.zeros(filters), name="conv.bias")
        self._cache: Optional[Tuple[Tuple[int, ...], np.ndarray]] = None

    @classmethod
    def from_arrays(cls, kernels: np.ndarray, bias: np.ndarray) -> "Conv2D":
        kernels = np.asarray(kernels, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if kernels.ndim != 4 or bias.shape != (kernels.shape[3],):
            raise RejectedInputError(
                f"Kernels must be kh x kw x Cin x Cout with a Cout bias, got {kernels.shape} / {bias.shape}"
            )
        layer = cls(kernels.shape[2], kernels.shape[3], (kernels.shape[0], kernels.shape[1]))
        layer.kernels.data[...] = kernels
        layer.bias.data[...] = bias
        return layer

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.kernels.dims[0], self.kernels.dims[1]

    @property
    def in_channels(self) -> int:
        return self.kernels.dims[2]

    @property
    def filters(self) -> int:
        return self.kernels.dims[3]

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        """Zero-padded patches as (N*H*W) x (kh*kw*Cin) rows, kernel-major then channel."""
        n, h, w, cin = x.shape
        kh, kw = self.kernel_size
        ph, pw = kh // 2, kw // 2
        padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # n, h, w, cin, kh, kw
        return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * cin)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise RejectedInputError(
                f"Conv2D expects N x H x W x {self.in_channels} input, got {x.shape}"
            )
        n, h, w, _ = x.shape
        cols = self._im2col(x)
        out = cols @ self.kernels.data.reshape(-1, self.filters) + self.bias.data
        self._cache = (x.shape, cols)
        return out.reshape(n, h, w, self.filters)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise UsageError("Conv2D.backward called without a cached forward pass")
        shape, cols = self._cache
        n, h, w, cin = shape
        kh, kw = self.kernel_size
        if dout.shape != (n, h, w, self.filters):
            raise RejectedInputError(f"Conv2D upstream gradient has shape {dout.shape}")
        dflat = dout.reshape(-1, self.filters)
        kmat = self.kernels.data.reshape(-1, self.filters)
        self.kernels.accumulate((cols.T @ dflat).reshape(self.kernels.dims))
        self.bias.accumulate(dflat.sum(axis=0))

        dcols = (dflat @ kmat.T).reshape(n, h, w, kh, kw, cin)
        ph, pw = kh // 2, kw // 2
        dpadded = np.zeros((n, h + 2 * ph, w + 2 * pw, cin))
        for i in range(kh):
            for j in range(kw):
                dpadded[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        return dpadded[:, ph:ph + h, pw:pw + w, :]

    def parameters(self) -> List[Tensor]:
        return [self.kernels, self.bias]


class FullyConnected(Layer):
    """out = x . W^T + b with weights stored m x n."""

    kind = LayerKind.FULLY_CONNECTED

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        if in_features < 1 or out_features < 1:
            raise ConfigurationError("Fully connected feature counts must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = Tensor(_kaiming_uniform(rng, (out_features, in_features), in_features), name="fc.weights")
        self.bias = Tensor(np.zeros(out_features), name="fc.bias")
        self._input: Optional[np.ndarray] = None

    @classmethod
    def from_arrays(cls, weights: np.ndarray, bias: np.ndarray) -> "FullyConnected":
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise RejectedInputError(f"Weights must be m x n with an m bias, got {weights.shape} / {bias.shape}")
        layer = cls(weights.shape[1], weights.shape[0])
        layer.weights.data[...] = weights
        layer.bias.data[...] = bias
        return layer

    @property
    def in_features(self) -> int:
        return self.weights.dims[1]

    @property
    def out_features(self) -> int:
        return self.weights.dims[0]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise RejectedInputError(f"FullyConnected expects N x {self.in_features} input, got {x.shape}")
        self._input = x
        return x @ self.weights.data.T + self.bias.data

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._input is None:
            raise UsageError("FullyConnected.backward called without a cached forward pass")
        self.weights.accumulate(dout.T @ self._input)
        self.bias.accumulate(dout.sum(axis=0))
        return dout @ self.weights.data

    def parameters(self) -> List[Tensor]:
        return [self.weights, self.bias]


class ReLU(Layer):
    """Elementwise max(x, 0); the gradient passes where the input was positive."""

    kind = LayerKind.RELU

    def __init__(self) -> None:
        self._mask: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise UsageError("ReLU.backward called without a cached forward pass")
        return np.where(self._mask, dout, 0.0)


class Flatten(Layer):
    """N x ... -> N x prod(...), restoring the shape on the way back."""

    kind = LayerKind.FLATTEN

    def __init__(self) -> None:
        self._shape: Optional[Tuple[int, ...]] = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise UsageError("Flatten.backward called without a cached forward pass")
        return dout.reshape(self._shape)


def _check_rate(rate: float) -> float:
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"Dropout rate must be in [0, 1), got {rate}")
    return float(rate)


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate) in training, identity at inference."""

    kind = LayerKind.DROPOUT

    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        self.rate = _check_rate(rate)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._scale: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if not training or self.rate == 0.0:
            self._scale = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._scale = keep / (1.0 - self.rate)
        return x * self._scale

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._scale is None:
            return dout
        return dout * self._scale


class LSTMCell(Layer):
    """Three-gate LSTM cell (forget, input, output) with a tanh candidate.

    Gate rows of ``weights`` are stacked [forget, input, output, candidate];
    columns are [x, h_prev].
    """

    kind = LayerKind.LSTM_CELL

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None,
                 forget_bias: float = 1.0):
        if input_size < 1 or hidden_size < 1:
            raise ConfigurationError("LSTM input and hidden sizes must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(input_size + hidden_size)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weights = Tensor(
            rng.uniform(-bound, bound, size=(4 * hidden_size, input_size + hidden_size)), name="lstm.weights"
        )
        bias = np.zeros(4 * hidden_size)
        bias[:hidden_size] = forget_bias
        self.bias = Tensor(bias, name="lstm.bias")

    def step(self, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
        """One time step on a batch; returns (h, c, cache)."""
        hs = self.hidden_size
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise RejectedInputError(f"LSTM cell expects N x {self.input_size} input, got {x.shape}")
        if h_prev.shape != (x.shape[0], hs) or c_prev.shape != (x.shape[0], hs):
            raise RejectedInputError(f"LSTM state must be N x {hs}, got {h_prev.shape} / {c_prev.shape}")
        z = np.concatenate([x, h_prev], axis=1)
        a = z @ self.weights.data.T + self.bias.data
        f = expit(a[:, :hs])
        i = expit(a[:, hs:2 * hs])
        o = expit(a[:, 2 * hs:3 * hs])
        g = np.tanh(a[:, 3 * hs:])
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        return h, c, (z, c_prev, f, i, o, g, tanh_c)

    def step_backward(self, dh: np.ndarray, dc: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Backward through one step; returns (dx, dh_prev, dc_prev)."""
        z, c_prev, f, i, o, g, tanh_c = cache
        d_o = dh * tanh_c
        dc_total = dc + dh * o * (1.0 - tanh_c ** 2)
        d_f = dc_total * c_prev
        d_i = dc_total * g
        d_g = dc_total * i
        dc_prev = dc_total * f
        da = np.concatenate(
            [d_f * f * (1.0 - f), d_i * i * (1.0 - i), d_o * o * (1.0 - o), d_g * (1.0 - g ** 2)], axis=1
        )
        self.weights.accumulate(da.T @ z)
        self.bias.accumulate(da.sum(axis=0))
        dz = da @ self.weights.data
        return dz[:, :self.input_size], dz[:, self.input_size:], dc_prev

    def parameters(self) -> List[Tensor]:
        return [self.weights, self.bias]


class LSTM(Layer):
    """Unrolls an LSTMCell over N x T x F input and returns every hidden state (N x T x H)."""

    kind = LayerKind.LSTM_CELL

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None):
        self.cell = LSTMCell(input_size, hidden_size, rng)
        self._caches: Optional[list] = None

    @property
    def hidden_size(self) -> int:
        return self.cell.hidden_size

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 3:
            raise RejectedInputError(f"LSTM expects N x T x F input, got {x.shape}")
        n, steps, _ = x.shape
        h = np.zeros((n, self.hidden_size))
        c = np.zeros((n, self.hidden_size))
        outputs = np.empty((n, steps, self.hidden_size))
        caches = []
        for t in range(steps):
            h, c, cache = self.cell.step(x[:, t, :], h, c)
            outputs[:, t, :] = h
            caches.append(cache)
        self._caches = caches
        return outputs

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._caches is None:
            raise UsageError("LSTM.backward called without a cached forward pass")
        n, steps, _ = dout.shape
        dx = np.empty((n, steps, self.cell.input_size))
        dh_next = np.zeros((n, self.hidden_size))
        dc_next = np.zeros((n, self.hidden_size))
        for t in reversed(range(steps)):
            dx[:, t, :], dh_next, dc_next = self.cell.step_backward(
                dout[:, t, :] + dh_next, dc_next, self._caches[t]
            )
        return dx

    def parameters(self) -> List[Tensor]:
        return self.cell.parameters()


@dataclass
class LayerSpec:
    """Hyperparameters for one layer of a fixed stack.

    ``build`` validates the sizes and returns a freshly initialised layer of
    that kind; LSTM_CELL builds the unrolled ``LSTM``.
    """
    kind: LayerKind
    kernel: Optional[Tuple[int, int]] = None
    filters: Optional[int] = None
    in_channels: Optional[int] = None
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    hidden_size: Optional[int] = None
    rate: float = 0.0

    def validate(self) -> "LayerSpec":
        """Raise ConfigurationError for sizes the layer kind cannot use."""
        if self.kind == LayerKind.CONV2D:
            if self.kernel is None or any(k < 1 or k % 2 == 0 for k in self.kernel):
                raise ConfigurationError(f"Conv kernel dims must be odd and >= 1, got {self.kernel}")
            if not self.filters or self.filters < 1 or not self.in_channels or self.in_channels < 1:
                raise ConfigurationError("Conv layer needs filters >= 1 and in_channels >= 1")
        elif self.kind == LayerKind.FULLY_CONNECTED:
            if not self.in_features or not self.out_features or self.in_features < 1 or self.out_features < 1:
                raise ConfigurationError("Fully connected layer needs in/out features >= 1")
        elif self.kind == LayerKind.LSTM_CELL:
            if not self.in_features or not self.hidden_size or self.in_features < 1 or self.hidden_size < 1:
                raise ConfigurationError("LSTM layer needs in_features and hidden_size >= 1")
        elif self.kind == LayerKind.DROPOUT:
            _check_rate(self.rate)
        return self

    def build(self, rng: np.random.Generator) -> Layer:
        self.validate()
        if self.kind == LayerKind.CONV2D:
            return Conv2D(self.in_channels, self.filters, self.kernel, rng)
        if self.kind == LayerKind.FULLY_CONNECTED:
            return FullyConnected(self.in_features, self.out_features, rng)
        if self.kind == LayerKind.LSTM_CELL:
            return LSTM(self.in_features, self.hidden_size, rng)
        if self.kind == LayerKind.DROPOUT:
            return Dropout(self.rate, rng)
        if self.kind == LayerKind.RELU:
            return ReLU()
        return Flatten()


def conv2d_forward(image: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Single-image convolution: H x W x Cin -> H x W x Cout."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise RejectedInputError(f"Expected an H x W x C image, got {image.shape}")
    return Conv2D.from_arrays(kernels, bias).forward(image[None])[0]


def fully_connected_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Single-vector affine map: W x + b."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise RejectedInputError(f"Expected a vector input, got {x.shape}")
    return FullyConnected.from_arrays(weights, bias).forward(x[None])[0]


def lstm_cell_step(x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
                   weights: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Single-vector LSTM step with explicit parameters."""
    weights = np.asarray(weights, dtype=np.float64)
    hidden = weights.shape[0] // 4
    cell = LSTMCell(weights.shape[1] - hidden, hidden)
    if weights.shape != cell.weights.dims or np.shape(bias) != cell.bias.dims:
        raise RejectedInputError(f"LSTM parameters have shapes {weights.shape} / {np.shape(bias)}")
    cell.weights.data[...] = weights
    cell.bias.data[...] = bias
    h, c, _ = cell.step(np.atleast_2d(x), np.atleast_2d(h_prev), np.atleast_2d(c_prev))
    return h[0], c[0]


def dropout_apply(x: np.ndarray, rate: float, rng: np.random.Generator, training: bool) -> np.ndarray:
    return Dropout(rate, rng).forward(np.asarray(x, dtype=np.float64), training=training)


def collect_parameters(layers: Sequence[Layer]) -> List[Tensor]:
    """Every trainable tensor of ``layers`` in layer order, as the optimizer and checkpoints expect."""
    params: List[Tensor] = []
    for layer in layers:
        params.extend(layer.parameters())
    return params
