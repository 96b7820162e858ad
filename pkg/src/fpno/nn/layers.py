"""Fully connected building blocks with hand-written reverse-mode gradients.

Tensors are batch-first float64 arrays. ``forward`` caches what ``backward``
needs; ``backward`` takes the gradient of the loss with respect to the output,
accumulates parameter gradients in ``grads`` and returns the gradient with
respect to the input.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..exceptions import DimensionError, StateError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

ACTIVATIONS = ("gelu", "linear", "tanh", "softmax")


def gelu(x):
    """Exact GELU ``x * Phi(x)``."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(g, dg):
    return g * (dg - np.sum(dg * g, axis=-1, keepdims=True))


class Module:
    def parameters(self):
        return []

    def gradients(self):
        return []

    def zero_grad(self):
        for g in self.gradients():
            g.fill(0.0)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class Dense(Module):
    def __init__(self, n_in, n_out, activation="gelu", rng=None, zero=False):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        gain = 2.0 if activation == "gelu" else 1.0
        if zero:
            self.W = np.zeros((n_in, n_out))
        else:
            self.W = rng.standard_normal((n_in, n_out)) * math.sqrt(gain / n_in)
        self.b = np.zeros(n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.activation = activation
        self._cache = None

    @property
    def n_in(self):
        return self.W.shape[0]

    @property
    def n_out(self):
        return self.W.shape[1]

    def parameters(self):
        return [self.W, self.b]

    def gradients(self):
        return [self.dW, self.db]

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"layer expects width {self.n_in}, got {x.shape[-1]}")
        z = x @ self.W + self.b
        if self.activation == "gelu":
            a = gelu(z)
        elif self.activation == "tanh":
            a = np.tanh(z)
        elif self.activation == "softmax":
            a = softmax(z)
        else:
            a = z
        self._cache = (x, z, a)
        return a

    def backward(self, dout):
        if self._cache is None:
            raise StateError("backward called before forward")
        x, z, a = self._cache
        if self.activation == "gelu":
            dz = dout * gelu_grad(z)
        elif self.activation == "tanh":
            dz = dout * (1.0 - a * a)
        elif self.activation == "softmax":
            dz = softmax_backward(a, dout)
        else:
            dz = dout
        self.dW += x.T @ dz
        self.db += dz.sum(axis=0)
        return dz @ self.W.T


class ResBlock(Module):
    """``x + GELU(fc(x))``."""

    def __init__(self, width, rng=None):
        self.fc = Dense(width, width, "gelu", rng)

    def parameters(self):
        return self.fc.parameters()

    def gradients(self):
        return self.fc.gradients()

    def forward(self, x):
        return x + self.fc.forward(x)

    def backward(self, dout):
        return dout + self.fc.backward(dout)


class SEResBlock(Module):
    """Fully connected layer, skip connection and a softmax squeeze-excitation gate.

    ``h = GELU(fc(x))``, ``g = softmax(exc2(GELU(exc1(h))))`` and the output is
    ``x + width * g * h``; the width factor makes a uniform gate the identity
    rescaling of ``h``.
    """

    def __init__(self, width, reduction=4, rng=None):
        hidden = max(1, width // reduction)
        self.width = width
        self.fc = Dense(width, width, "gelu", rng)
        self.exc1 = Dense(width, hidden, "gelu", rng)
        self.exc2 = Dense(hidden, width, "softmax", rng)
        self._cache = None

    def parameters(self):
        return self.fc.parameters() + self.exc1.parameters() + self.exc2.parameters()

    def gradients(self):
        return self.fc.gradients() + self.exc1.gradients() + self.exc2.gradients()

    def gate(self, x):
        return self.exc2.forward(self.exc1.forward(gelu(x @ self.fc.W + self.fc.b)))

    def forward(self, x):
        h = self.fc.forward(x)
        g = self.exc2.forward(self.exc1.forward(h))
        self._cache = (h, g)
        return x + self.width * g * h

    def backward(self, dout):
        if self._cache is None:
            raise StateError("backward called before forward")
        h, g = self._cache
        scaled = self.width * dout
        dh = scaled * g
        dh = dh + self.exc1.backward(self.exc2.backward(scaled * h))
        return dout + self.fc.backward(dh)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers for g in layer.gradients()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    @property
    def n_in(self):
        return self.layers[0].n_in


def resnet(widths, se=True, reduction=4, rng=None, zero_last=False):
    """Lifting layer, residual blocks for equal consecutive widths, linear head.

    ``widths = [n_in, h1, ..., n_out]``; e.g. ``[1089, 512, 512, 512, 256]``
    is a 1089->512 GELU layer, two 512-wide blocks and a linear 512->256 layer.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = np.random.default_rng() if rng is None else rng
    if len(widths) == 2:
        return Sequential([Dense(widths[0], widths[1], "linear", rng, zero=zero_last)])
    layers = [Dense(widths[0], widths[1], "gelu", rng)]
    for w_in, w_out in zip(widths[1:-2], widths[2:-1]):
        if w_in == w_out:
            layers.append(SEResBlock(w_in, reduction, rng) if se else ResBlock(w_in, rng))
        else:
            layers.append(Dense(w_in, w_out, "gelu", rng))
    layers.append(Dense(widths[-2], widths[-1], "linear", rng, zero=zero_last))
    return Sequential(layers)
