"""Layer kernels, loss and the ADAM optimizer.

Every layer consumes and produces 2-D float64 arrays of shape
``(batch, features)``. Convolution layers view their feature axis as
``(channels, length)`` in channel-major order, so layers chain without
explicit reshape/flatten steps.
"""

from __future__ import annotations

import copy
import warnings
from typing import Iterator, NamedTuple

import numpy as np

from .exceptions import ConfigurationError, DimensionError, NumericalError, StateError

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805

DTYPE = np.float64


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def selu(x):
    x = np.asarray(x, dtype=DTYPE)
    # np.minimum keeps expm1 from overflowing on the unused branch
    out = np.asarray(np.expm1(np.minimum(x, 0.0)))
    out *= SELU_ALPHA
    np.copyto(out, x, where=x > 0)
    out *= SELU_LAMBDA
    return out


def selu_backward(x, grad_out):
    x = np.asarray(x, dtype=DTYPE)
    slope = np.where(x > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    return grad_out * slope


def softmax(x):
    x = np.asarray(x, dtype=DTYPE)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


class Loss(NamedTuple):
    value: float
    grad: np.ndarray
    n_clamped: int


def cross_entropy(pred, onehot, *, clamp=1e-12):
    """Mean negative log-likelihood of one-hot targets under ``pred``.

    ``grad`` is the gradient with respect to the pre-softmax logits,
    ``(pred - onehot) / N``. Zero probabilities at the true class are
    clamped to ``clamp`` before the log; ``n_clamped`` counts them.
    """
    pred = np.asarray(pred, dtype=DTYPE)
    onehot = np.asarray(onehot, dtype=DTYPE)
    if pred.shape != onehot.shape or pred.ndim != 2:
        raise DimensionError(f"prediction shape {pred.shape} does not match target shape {onehot.shape}")
    n = pred.shape[0]
    if n == 0:
        raise DimensionError("cross_entropy on an empty batch")
    p_true = np.sum(pred * onehot, axis=1)
    n_clamped = int(np.count_nonzero(p_true < clamp))
    if n_clamped:
        warnings.warn(f"{n_clamped} true-class probabilities clamped to {clamp}", RuntimeWarning, stacklevel=2)
    value = -float(np.sum(np.log(np.maximum(p_true, clamp)))) / n
    return Loss(value, (pred - onehot) / n, n_clamped)


class Layer:
    """Base layer. Subclasses fill ``params``/``grads`` and ``stats``."""

    kind = "Layer"

    def __init__(self, n_in, n_out):
        if n_in < 1 or n_out < 1:
            raise ConfigurationError(f"{self.kind}: sizes must be >= 1, got {n_in}->{n_out}")
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.name = self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}
        self._cache = None

    def _check_input(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"layer {self.name}: expected input (batch, {self.n_in}), got {x.shape}")
        return x

    def _cached(self):
        if self._cache is None:
            raise StateError(f"layer {self.name}: backward called without a cached training forward pass")
        return self._cache

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def count_params(self):
        """Return ``(trainable, total)``; total includes non-trainable statistics."""
        trainable = sum(p.size for p in self.params.values())
        return trainable, trainable + sum(s.size for s in self.stats.values())

    def shape_ints(self):
        return [self.n_in, self.n_out]

    def __repr__(self):
        return f"{type(self).__name__}({self.n_in}->{self.n_out})"


class Dense(Layer):
    kind = "Dense"

    def __init__(self, n_in, n_out, rng=None):
        super().__init__(n_in, n_out)
        rng = np.random.default_rng() if rng is None else rng
        self.params["weight"] = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.params["bias"] = np.zeros(n_out, dtype=DTYPE)

    def forward(self, x, training=False, rng=None):
        x = self._check_input(x)
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad_out):
        x = self._cached()
        self.grads["weight"] = x.T @ grad_out
        self.grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.params["weight"].T


class BatchNorm(Layer):
    kind = "BatchNorm"

    def __init__(self, n, momentum=0.99, eps=1e-3):
        super().__init__(n, n)
        if not 0.0 <= momentum < 1.0 or eps <= 0.0:
            raise ConfigurationError(f"BatchNorm: bad momentum={momentum} or eps={eps}")
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params["gamma"] = np.ones(n, dtype=DTYPE)
        self.params["beta"] = np.zeros(n, dtype=DTYPE)
        self.stats["moving_mean"] = np.zeros(n, dtype=DTYPE)
        self.stats["moving_var"] = np.ones(n, dtype=DTYPE)

    def forward(self, x, training=False, rng=None):
        x = self._check_input(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not training:
            self._cache = None
            inv_std = 1.0 / np.sqrt(self.stats["moving_var"] + self.eps)
            return (x - self.stats["moving_mean"]) * inv_std * gamma + beta
        if x.shape[0] < 2:
            raise ConfigurationError(f"layer {self.name}: training-mode batch norm needs batch >= 2")
        mean = x.mean(axis=0)
        centered = x - mean
        var = np.mean(centered**2, axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = centered * inv_std
        m = self.momentum
        self.stats["moving_mean"] = m * self.stats["moving_mean"] + (1.0 - m) * mean
        self.stats["moving_var"] = m * self.stats["moving_var"] + (1.0 - m) * var
        self._cache = (x_hat, inv_std)
        return x_hat * gamma + beta

    def backward(self, grad_out):
        x_hat, inv_std = self._cached()
        n = x_hat.shape[0]
        self.grads["gamma"] = np.sum(grad_out * x_hat, axis=0)
        self.grads["beta"] = grad_out.sum(axis=0)
        g = grad_out * self.params["gamma"]
        return (inv_std / n) * (n * g - g.sum(axis=0) - x_hat * np.sum(g * x_hat, axis=0))

    def shape_ints(self):
        return [self.n_in]


class Selu(Layer):
    kind = "Selu"

    def __init__(self, n):
        super().__init__(n, n)

    def forward(self, x, training=False, rng=None):
        x = self._check_input(x)
        out = selu(x)
        self._cache = (x > 0, out)
        return out

    def backward(self, grad_out):
        positive, out = self._cached()
        # for x <= 0 the derivative is out + lambda * alpha
        slope = out + SELU_LAMBDA * SELU_ALPHA
        slope[positive] = SELU_LAMBDA
        return grad_out * slope

    def shape_ints(self):
        return [self.n_in]


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1/retain`` at train time."""

    kind = "Dropout"

    def __init__(self, n, retain=0.5):
        super().__init__(n, n)
        if not 0.0 < retain <= 1.0:
            raise ConfigurationError(f"Dropout: retain probability must be in (0, 1], got {retain}")
        self.retain = float(retain)

    def forward(self, x, training=False, rng=None):
        x = self._check_input(x)
        if not training or self.retain == 1.0:
            self._cache = None if not training else np.ones((), dtype=DTYPE)
            return x
        if rng is None:
            raise ConfigurationError(f"layer {self.name}: training-mode dropout needs an rng")
        mask = (rng.random(x.shape) < self.retain) / self.retain
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        return grad_out * self._cached()

    def shape_ints(self):
        return [self.n_in]


class Softmax(Layer):
    kind = "Softmax"

    def __init__(self, n):
        super().__init__(n, n)

    def forward(self, x, training=False, rng=None):
        out = softmax(self._check_input(x))
        self._cache = out
        return out

    def backward(self, grad_out):
        y = self._cached()
        return y * (grad_out - np.sum(grad_out * y, axis=1, keepdims=True))

    def shape_ints(self):
        return [self.n_in]


class SpectralConv(Layer):
    """Strided 1-D valid convolution along the spectral axis.

    ``shared=True`` uses one kernel bank for every output position (CNN);
    ``shared=False`` learns an independent kernel bank and bias per output
    position (locally connected, LCN). When the input is shorter than the
    kernel, the kernel is narrowed to the input length.
    """

    def __init__(self, in_channels, length, out_channels, kernel=5, stride=3, shared=True, rng=None):
        if length < 1 or in_channels < 1 or out_channels < 1 or kernel < 1 or stride < 1:
            raise ConfigurationError("SpectralConv: all sizes must be >= 1")
        self.kind = "SpectralConvShared" if shared else "SpectralConvLocal"
        self.in_channels = int(in_channels)
        self.length = int(length)
        self.out_channels = int(out_channels)
        self.kernel = int(min(kernel, length))
        self.stride = int(stride)
        self.shared = bool(shared)
        self.out_length = (self.length - self.kernel) // self.stride + 1
        super().__init__(self.in_channels * self.length, self.out_channels * self.out_length)
        self._taps = np.arange(self.out_length)[:, None] * self.stride + np.arange(self.kernel)[None, :]
        rng = np.random.default_rng() if rng is None else rng
        fan_in, fan_out = in_channels * self.kernel, out_channels * self.kernel
        if shared:
            self.params["weight"] = glorot_uniform(rng, (out_channels, in_channels, self.kernel), fan_in, fan_out)
            self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)
        else:
            shape = (self.out_length, out_channels, in_channels, self.kernel)
            self.params["weight"] = glorot_uniform(rng, shape, fan_in, fan_out)
            self.params["bias"] = np.zeros((out_channels, self.out_length), dtype=DTYPE)

    def forward(self, x, training=False, rng=None):
        x = self._check_input(x)
        cols = x.reshape(-1, self.in_channels, self.length)[:, :, self._taps]
        w, b = self.params["weight"], self.params["bias"]
        if self.shared:
            out = np.einsum("bilk,oik->bol", cols, w) + b[None, :, None]
        else:
            out = np.einsum("bilk,loik->bol", cols, w) + b[None]
        self._cache = cols
        return out.reshape(x.shape[0], self.n_out)

    def backward(self, grad_out):
        cols = self._cached()
        g = grad_out.reshape(-1, self.out_channels, self.out_length)
        w = self.params["weight"]
        if self.shared:
            self.grads["weight"] = np.einsum("bol,bilk->oik", g, cols)
            self.grads["bias"] = g.sum(axis=(0, 2))
            dcols = np.einsum("bol,oik->bilk", g, w)
        else:
            self.grads["weight"] = np.einsum("bol,bilk->loik", g, cols)
            self.grads["bias"] = g.sum(axis=0)
            dcols = np.einsum("bol,loik->bilk", g, w)
        dx = np.zeros((g.shape[0], self.in_channels, self.length), dtype=DTYPE)
        # positions within one tap column are distinct, so plain += is safe
        for j in range(self.kernel):
            dx[:, :, self._taps[:, j]] += dcols[:, :, :, j]
        return dx.reshape(g.shape[0], self.n_in)

    def shape_ints(self):
        return [self.in_channels, self.length, self.out_channels, self.kernel, self.stride]

    def __repr__(self):
        return (f"{type(self).__name__}({self.in_channels}x{self.length} -> "
                f"{self.out_channels}x{self.out_length}, k={self.kernel}, s={self.stride}, "
                f"{'shared' if self.shared else 'local'})")


class Network:
    """An ordered stack of layers with shared forward/backward plumbing."""

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ConfigurationError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer {i} ({a!r}) output {a.n_out} does not feed layer {i + 1} ({b!r})")
        for i, layer in enumerate(self.layers):
            layer.name = f"{i}:{layer.kind}"

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, grad_out, from_logits=False):
        """Backpropagate ``grad_out`` and return the input gradient.

        With ``from_logits=True`` the gradient is taken to be with respect to
        the input of a trailing Softmax layer, which is then skipped.
        """
        layers = self.layers
        if from_logits:
            if layers[-1].kind != "Softmax":
                raise StateError("from_logits=True requires a trailing Softmax layer")
            layers = layers[:-1]
        for layer in reversed(layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"{prefix}{i}.{key}", layer, key

    def scale_grads(self, factor):
        for layer in self.layers:
            for key in layer.grads:
                layer.grads[key] = layer.grads[key] * factor

    def count_params(self):
        trainable = total = 0
        for layer in self.layers:
            t, n = layer.count_params()
            trainable += t
            total += n
        return trainable, total

    def clone(self):
        other = copy.deepcopy(self)
        for layer in other.layers:
            layer._cache = None
            layer.grads = {}
        return other

    def __repr__(self):
        return "Network(" + ", ".join(repr(layer) for layer in self.layers) + ")"


def count_params(network):
    return network.count_params()


class Adam:
    """ADAM with inverse-time decay ``lr_t = lr / (1 + decay * t)``.

    ``t`` counts completed updates; it is incremented before the rate is
    computed, so the first step uses ``lr / (1 + decay)``.
    """

    def __init__(self, lr=0.001, decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0 or decay < 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ConfigurationError(f"invalid ADAM settings lr={lr} decay={decay} b1={beta1} b2={beta2} eps={eps}")
        self.lr = float(lr)
        self.decay = float(decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def rate(self, t=None):
        t = self.t if t is None else t
        return self.lr / (1.0 + self.decay * t)

    def step(self, named_params):
        """Update parameters in place.

        ``named_params`` yields ``(name, layer, key)`` triples; the gradient
        is read from ``layer.grads[key]``. Moving statistics are not touched.
        """
        items = list(named_params)
        for name, layer, key in items:
            if key not in layer.grads:
                raise StateError(f"no gradient for parameter {name}")
            if not np.all(np.isfinite(layer.grads[key])):
                raise NumericalError(f"non-finite gradient in parameter {name} at ADAM step {self.t + 1}")
        self.t += 1
        lr = self.rate()
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, layer, key in items:
            g = layer.grads[key]
            p = layer.params[key]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(named_params, optimizer):
    optimizer.step(named_params)
    return optimizer
