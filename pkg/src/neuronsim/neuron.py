"""Neuron-centric computation: each neuron consumes messages from its
neighbours and emits a single value.

Forward messages carry ``(input, weight)`` pairs from the previous layer,
backward messages carry ``(delta, weight)`` pairs from the next layer.
Weight updates are not applied here; :func:`standard_backward` returns
gradients and the trainer owns the update rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractViolation, NumericOverflowError, UsageError
from .numeric import ActivationKind, Rng, activation_derivative, apply_activation, binomial_draw

NORMALIZE_EPS = 1e-12


class ForwardMessage(NamedTuple):
    source_index: int
    input: float
    weight: float


class BackwardMessage(NamedTuple):
    source_index: int
    delta: float
    weight: float


@dataclass(frozen=True)
class NeuronKind:
    """``Standard`` or ``Dropout(retention)``."""

    tag: str = "standard"
    retention: float = 1.0

    def __post_init__(self):
        if self.tag not in ("standard", "dropout"):
            raise ContractViolation(f"unknown neuron kind {self.tag!r}")
        if not 0.0 < self.retention <= 1.0:
            raise ContractViolation(
                f"retention probability must lie in (0, 1], got {self.retention}")

    @classmethod
    def standard(cls):
        return cls("standard", 1.0)

    @classmethod
    def dropout(cls, retention: float):
        return cls("dropout", float(retention))

    @property
    def is_dropout(self) -> bool:
        return self.tag == "dropout"

    def __str__(self):
        return f"dropout({self.retention:g})" if self.is_dropout else "standard"


STANDARD = NeuronKind.standard()


@dataclass
class NeuronContext:
    neuron_id: tuple
    activation: ActivationKind
    kind: NeuronKind = STANDARD
    is_training: bool = True
    cached_output: Optional[float] = None
    cached_mask: float = 1.0
    # (source_index, input) pairs seen in the last forward pass
    inputs: list = field(default_factory=list)


def _weighted_sum(ctx, messages, bias):
    total = float(bias)
    for m in messages:
        total += m.input * m.weight
    if not math.isfinite(total):
        raise NumericOverflowError(
            f"neuron {ctx.neuron_id} produced a non-finite weighted sum", neuron=ctx.neuron_id)
    ctx.inputs = [(m.source_index, m.input) for m in messages]
    return total


def standard_forward(ctx: NeuronContext, messages: Sequence[ForwardMessage], bias: float = 0.0) -> float:
    total = _weighted_sum(ctx, messages, bias)
    out = apply_activation(ctx.activation, total)
    ctx.cached_output = out
    ctx.cached_mask = 1.0
    return out


def dropout_forward(ctx: NeuronContext, messages: Sequence[ForwardMessage], bias: float,
                    rng: Optional[Rng]) -> float:
    """Dropout neuron: ``f(sum) * m`` with ``m ~ Bernoulli(p)`` while training,
    ``f(sum) * p`` at inference. A dropped neuron emits 0 and skips the sum."""
    if not ctx.kind.is_dropout:
        raise ContractViolation(f"neuron {ctx.neuron_id} is not a dropout neuron")
    p = ctx.kind.retention
    if ctx.is_training:
        mask = float(binomial_draw(rng, p))
        if mask == 0.0:
            ctx.inputs = [(m.source_index, m.input) for m in messages]
            ctx.cached_mask = 0.0
            ctx.cached_output = 0.0
            return 0.0
    else:
        mask = p
    total = _weighted_sum(ctx, messages, bias)
    out = apply_activation(ctx.activation, total) * mask
    ctx.cached_mask = mask
    ctx.cached_output = out
    return out


def standard_backward(ctx: NeuronContext, messages: Sequence[BackwardMessage]):
    """Return ``(propagated_delta, [(source_index, gradient), ...])``.

    Gradients are loss gradients: descent subtracts ``lr * gradient``.
    """
    if ctx.cached_output is None:
        raise UsageError(f"backward called on neuron {ctx.neuron_id} before any forward pass")
    if ctx.cached_mask == 0.0:
        return 0.0, [(src, 0.0) for src, _ in ctx.inputs]
    gradient = 0.0
    for m in messages:
        gradient += m.delta * m.weight
    delta = gradient * activation_derivative(ctx.activation, ctx.cached_output)
    return delta, [(src, x * delta) for src, x in ctx.inputs]


def interlayer_normalize(outputs):
    """Divide a layer's outputs by their sum; near-zero sums pass through."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.size == 0:
        raise ContractViolation("cannot normalize an empty layer")
    total = outputs.sum(axis=-1, keepdims=True)
    safe = np.abs(total) >= NORMALIZE_EPS
    return np.where(safe, outputs / np.where(safe, total, 1.0), outputs)


def interlayer_normalize_backward(outputs, grad):
    """Chain rule through :func:`interlayer_normalize`.

    ``outputs`` are the values before normalization and ``grad`` is the loss
    gradient with respect to the normalized values.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    total = outputs.sum(axis=-1, keepdims=True)
    safe = np.abs(total) >= NORMALIZE_EPS
    denom = np.where(safe, total, 1.0)
    normed = outputs / denom
    inner = (grad * normed).sum(axis=-1, keepdims=True)
    return np.where(safe, (grad - inner) / denom, grad)
