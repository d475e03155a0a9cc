"""Numeric kernels: activations, softmax, cross-entropy and seeded sampling.

Every scalar kernel is a thin wrapper over its array form so that the
per-neuron and per-layer execution paths share one arithmetic definition.
All values are float64.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from .errors import ContractViolation

CE_CLAMP = 1e-12


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"
    # Logit passthrough at neuron level; the layer applies softmax.
    SOFTMAX_OUTPUT = "softmax"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractViolation(f"unknown activation {value!r}") from None


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(kind, x):
    """Elementwise activation of a float64 array."""
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.TANH:
        return np.tanh(x)
    if kind is ActivationKind.SIGMOID:
        return _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    if kind in (ActivationKind.IDENTITY, ActivationKind.SOFTMAX_OUTPUT):
        return x.copy()
    raise ContractViolation(f"unknown activation {kind!r}")


def activation_grad(kind, y):
    """Derivative of the activation, expressed through its output ``y``.

    ReLU uses 0 at the kink (``y == 0``).
    """
    y = np.asarray(y, dtype=np.float64)
    if kind is ActivationKind.RELU:
        return (y > 0).astype(np.float64)
    if kind is ActivationKind.TANH:
        return 1.0 - y * y
    if kind is ActivationKind.SIGMOID:
        return y * (1.0 - y)
    if kind in (ActivationKind.IDENTITY, ActivationKind.SOFTMAX_OUTPUT):
        return np.ones_like(y)
    raise ContractViolation(f"unknown activation {kind!r}")


def apply_activation(kind: ActivationKind, x: float) -> float:
    return float(activate(kind, np.float64(x)))


def activation_derivative(kind: ActivationKind, output: float) -> float:
    return float(activation_grad(kind, np.float64(output)))


def softmax(v):
    """Row-wise softmax with max subtraction. Accepts 1-D or 2-D input."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ContractViolation("softmax of an empty vector")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred, target) -> float:
    """-ln(pred[t]) for the hot index t of ``target``; pred is clamped at 1e-12."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolation(
            f"prediction has length {pred.shape} but target has {target.shape}")
    t = int(np.argmax(target))
    return -math.log(max(float(pred[t]), CE_CLAMP))


def cross_entropy_rows(pred, labels):
    """Per-row cross-entropy for a batch of probability rows and integer labels."""
    picked = pred[np.arange(len(labels)), labels]
    return -np.log(np.maximum(picked, CE_CLAMP))


class Rng:
    """Deterministic, splittable random stream.

    A stream is identified by ``(seed, *keys)``; :meth:`derive` builds a child
    stream from the identity alone, never from the current state, so workers
    and neurons get the same draws however they are scheduled.
    """

    def __init__(self, seed: int, *keys: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, *self.keys])))

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def random(self, size=None):
        return self._gen.random(size)

    def bernoulli(self, p: float, size):
        """Vector of 0/1 draws; consumes the stream exactly like repeated
        :func:`binomial_draw` calls in row-major order."""
        return (self._gen.random(size) < p).astype(np.float64)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, keys={self.keys})"


def binomial_draw(rng: Rng, p: float) -> int:
    """One Bernoulli(p) draw; advances ``rng`` by exactly one value."""
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"probability must lie in [0, 1], got {p}")
    return 1 if rng.random() < p else 0
