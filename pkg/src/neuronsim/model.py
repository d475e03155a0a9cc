"""Layered network construction and forward/backward passes.

Two execution engines compute the same function:

* ``"neuron"`` drives every neuron through :mod:`neuronsim.neuron`, passing
  explicit :class:`ForwardMessage`/:class:`BackwardMessage` objects along the
  connections a sub-model retains. It is the reference semantics.
* ``"vector"`` evaluates a whole layer at once with numpy. Training runs use
  it; tests pin it to the neuron engine.

Layers always complete before the next one starts (a per-layer barrier), and
dropout masks are drawn from one stream per layer in example-major,
neuron-minor order, so both engines see identical masks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractViolation, NumericOverflowError
from .neuron import (
    STANDARD,
    BackwardMessage,
    ForwardMessage,
    NeuronContext,
    NeuronKind,
    dropout_forward,
    interlayer_normalize,
    interlayer_normalize_backward,
    standard_backward,
    standard_forward,
)
from .numeric import (
    ActivationKind,
    Rng,
    activate,
    activation_grad,
    cross_entropy_rows,
    softmax,
)
from .partition import MaskedWeightView, SubModelMask

INIT_STREAM = 0x494E4954  # "INIT"
TRAINING = "training"
INFERENCE = "inference"
ENGINES = ("vector", "neuron")


@dataclass(frozen=True)
class LayerSpec:
    units: int
    activation: ActivationKind = ActivationKind.IDENTITY
    neuron_kind: NeuronKind = STANDARD
    normalize: bool = False

    def __post_init__(self):
        if int(self.units) < 1:
            raise ContractViolation(f"a layer needs at least one unit, got {self.units}")
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))


class WeightStore:
    """Parent-model parameters: weights ``(out, in)``, biases and momentum
    velocities for every adjacent layer pair."""

    def __init__(self, weights=(), biases=(), vel_weights=None, vel_biases=None):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.vel_weights = ([np.zeros_like(w) for w in self.weights] if vel_weights is None
                            else [np.asarray(v, dtype=np.float64) for v in vel_weights])
        self.vel_biases = ([np.zeros_like(b) for b in self.biases] if vel_biases is None
                           else [np.asarray(v, dtype=np.float64) for v in vel_biases])
        for l, w in enumerate(self.weights):
            if self.biases[l].shape != (w.shape[0],):
                raise ContractViolation(f"bias {l} has shape {self.biases[l].shape}, weights {w.shape}")
            if self.vel_weights[l].shape != w.shape or self.vel_biases[l].shape != self.biases[l].shape:
                raise ContractViolation(f"velocity shapes for layer pair {l} do not match parameters")

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    def copy(self) -> "WeightStore":
        return WeightStore([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           [v.copy() for v in self.vel_weights], [v.copy() for v in self.vel_biases])

    def frozen(self) -> "WeightStore":
        """Read-only copy, safe to hand to concurrent readers."""
        snap = self.copy()
        for arr in snap.arrays():
            arr.flags.writeable = False
        return snap

    def arrays(self):
        return [*self.weights, *self.biases, *self.vel_weights, *self.vel_biases]

    def equals(self, other: "WeightStore") -> bool:
        """Bitwise equality of every stored array."""
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs))


@dataclass
class ParameterDelta:
    """Loss gradients for every weight and bias, averaged over ``sample_count``
    examples. ``loss`` is the matching mean cross-entropy."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    sample_count: int = 1
    loss: float = 0.0

    @classmethod
    def zeros(cls, shapes, sample_count=0):
        return cls([np.zeros(s) for s in shapes], [np.zeros(s[0]) for s in shapes], sample_count, 0.0)

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    def copy(self) -> "ParameterDelta":
        return ParameterDelta([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                              self.sample_count, self.loss)


class NetworkModel:
    """Ordered layers (first is the input) plus the parent :class:`WeightStore`."""

    def __init__(self, seed: int = 0, use_bias: bool = True):
        self.layers: List[LayerSpec] = []
        self.store = WeightStore()
        self.seed = int(seed)
        self.use_bias = bool(use_bias)

    def add_layer(self, spec: LayerSpec) -> "NetworkModel":
        return add_layer(self, spec)

    @property
    def layer_sizes(self):
        return [spec.units for spec in self.layers]

    def with_store(self, store: WeightStore) -> "NetworkModel":
        """Same architecture over a different parameter set (e.g. a pulled snapshot)."""
        if store.shapes != self.store.shapes:
            raise ContractViolation(f"store shapes {store.shapes} do not match {self.store.shapes}")
        other = NetworkModel.__new__(NetworkModel)
        other.layers = self.layers
        other.store = store
        other.seed = self.seed
        other.use_bias = self.use_bias
        return other

    def validate(self):
        if len(self.layers) < 2:
            raise ContractViolation("a network needs at least an input and an output layer")
        out = self.layers[-1]
        if out.neuron_kind.is_dropout:
            raise ContractViolation("the output layer cannot use dropout neurons")
        if out.activation not in (ActivationKind.SOFTMAX_OUTPUT, ActivationKind.IDENTITY):
            raise ContractViolation("the output layer feeds softmax and must emit raw logits")
        if out.normalize:
            raise ContractViolation("the output layer is normalized by softmax, not interlayer")

    def __repr__(self):
        return "NetworkModel(" + " -> ".join(
            f"{s.units}:{s.activation.value}/{s.neuron_kind}" for s in self.layers) + ")"


def add_layer(model: NetworkModel, spec: LayerSpec) -> NetworkModel:
    """Append a layer; allocate ``units x previous units`` weights drawn
    uniformly from ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` with zero biases."""
    if not isinstance(spec, LayerSpec):
        raise ContractViolation(f"expected a LayerSpec, got {spec!r}")
    if model.layers:
        fan_in = model.layers[-1].units
        pair = len(model.store.weights)
        bound = 1.0 / np.sqrt(fan_in)
        rng = Rng(model.seed, INIT_STREAM, pair)
        w = rng.uniform(-bound, bound, (spec.units, fan_in))
        model.store = WeightStore(
            [*model.store.weights, w],
            [*model.store.biases, np.zeros(spec.units)],
            [*model.store.vel_weights, np.zeros_like(w)],
            [*model.store.vel_biases, np.zeros(spec.units)],
        )
    model.layers.append(spec)
    return model


def build_mlp(sizes: Sequence[int], hidden_activation=ActivationKind.RELU,
              input_retention: float = 1.0, hidden_retention: float = 1.0,
              seed: int = 0, use_bias: bool = True) -> NetworkModel:
    """Fully connected net; retentions below 1 make that layer's neurons dropout neurons."""
    def kind(p):
        return NeuronKind.dropout(p) if p < 1.0 else STANDARD

    model = NetworkModel(seed=seed, use_bias=use_bias)
    model.add_layer(LayerSpec(sizes[0], ActivationKind.IDENTITY, kind(input_retention)))
    for units in sizes[1:-1]:
        model.add_layer(LayerSpec(units, hidden_activation, kind(hidden_retention)))
    model.add_layer(LayerSpec(sizes[-1], ActivationKind.SOFTMAX_OUTPUT))
    return model


@dataclass
class Trace:
    """Everything :func:`back_propagate` needs from a forward pass.

    ``outputs[l]`` is what layer ``l`` sent forward (after dropout and
    normalization); ``neuron_outputs[l]`` is the raw neuron emission before
    normalization; ``dropout[l]`` is the per-neuron mask (all ones for
    standard neurons, the retention value at inference).
    """

    mode: str
    engine: str
    outputs: List[np.ndarray]
    neuron_outputs: List[np.ndarray]
    dropout: List[np.ndarray]
    probabilities: np.ndarray
    contexts: Optional[list] = None
    mask: Optional[SubModelMask] = field(default=None, repr=False)


def _check_pass(model, mask, x):
    model.validate()
    shapes = model.store.shapes
    if mask is None:
        mask = SubModelMask.full(model.layer_sizes)
    mask.check_shapes(shapes)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != model.layers[0].units:
        raise ContractViolation(
            f"input has shape {x.shape}, expected ({model.layers[0].units},) or a batch of those")
    return mask, x2, single


def _layer_streams(model, mode, rng):
    if mode == TRAINING and any(s.neuron_kind.is_dropout for s in model.layers):
        if rng is None:
            raise ContractViolation("training-mode forward with dropout neurons needs an rng")
        return [rng.derive(l) for l in range(len(model.layers))]
    return [None] * len(model.layers)


def feed_forward(model: NetworkModel, mask: Optional[SubModelMask], x, mode: str = INFERENCE,
                 rng: Optional[Rng] = None, engine: str = "vector"):
    """Run the network on one example (1-D) or a batch (2-D).

    Returns ``(probabilities, trace)``; probabilities are 1-D for 1-D input.
    """
    if mode not in (TRAINING, INFERENCE):
        raise ContractViolation(f"mode must be {TRAINING!r} or {INFERENCE!r}, got {mode!r}")
    mask, x2, single = _check_pass(model, mask, x)
    streams = _layer_streams(model, mode, rng)
    if engine == "vector":
        trace = _forward_vector(model, mask, x2, mode, streams)
    elif engine == "neuron":
        trace = _forward_neurons(model, mask, x2, mode, streams)
    else:
        raise ContractViolation(f"unknown engine {engine!r}; pick one of {ENGINES}")
    trace.mask = mask
    probs = trace.probabilities
    return (probs[0] if single else probs), trace


def _dropout_mask(spec, mode, stream, shape):
    kind = spec.neuron_kind
    if not kind.is_dropout:
        return np.ones(shape)
    if mode == INFERENCE:
        return np.full(shape, kind.retention)
    return stream.bernoulli(kind.retention, shape)


def _forward_vector(model, mask, x, mode, streams):
    store = model.store
    n = x.shape[0]
    outputs, neuron_outputs, drops = [], [], []
    prev = None
    for l, spec in enumerate(model.layers):
        if l == 0:
            z = x
        else:
            w = np.where(mask.retain[l - 1], store.weights[l - 1], 0.0)
            with np.errstate(over="ignore", invalid="ignore"):
                z = prev @ w.T
                if model.use_bias:
                    z = z + store.biases[l - 1]
            bad = ~np.isfinite(z)
            if bad.any():
                j = int(np.argwhere(bad)[0][1])
                raise NumericOverflowError(
                    f"neuron {(l, j)} produced a non-finite weighted sum", neuron=(l, j))
        h = activate(spec.activation, z)
        m = _dropout_mask(spec, mode, streams[l], (n, spec.units))
        y = np.where(m != 0.0, h * m, 0.0) if spec.neuron_kind.is_dropout else h
        neuron_outputs.append(y)
        drops.append(m)
        if spec.normalize:
            y = interlayer_normalize(y)
        outputs.append(y)
        prev = y
    return Trace(mode, "vector", outputs, neuron_outputs, drops, softmax(prev))


def _forward_neurons(model, mask, x, mode, streams):
    view = MaskedWeightView(model.store, mask)
    n_layers = len(model.layers)
    outputs = [np.zeros((x.shape[0], s.units)) for s in model.layers]
    neuron_outputs = [np.zeros_like(o) for o in outputs]
    drops = [np.ones_like(o) for o in outputs]
    contexts = []
    training = mode == TRAINING
    for r in range(x.shape[0]):
        row_ctx = []
        for l, spec in enumerate(model.layers):
            layer_ctx = []
            for j in range(spec.units):
                ctx = NeuronContext((l, j), spec.activation, spec.neuron_kind, training)
                if l == 0:
                    messages = [ForwardMessage(-1, float(x[r, j]), 1.0)]
                    bias = 0.0
                else:
                    idx, ws = view.incoming(l - 1, j)
                    prev = outputs[l - 1][r]
                    messages = [ForwardMessage(int(i), float(prev[i]), float(w)) for i, w in zip(idx, ws)]
                    bias = float(model.store.biases[l - 1][j]) if model.use_bias else 0.0
                if spec.neuron_kind.is_dropout:
                    y = dropout_forward(ctx, messages, bias, streams[l])
                else:
                    y = standard_forward(ctx, messages, bias)
                neuron_outputs[l][r, j] = y
                drops[l][r, j] = ctx.cached_mask
                layer_ctx.append(ctx)
            # barrier: the whole layer is done before normalization and the next layer
            layer_out = neuron_outputs[l][r]
            outputs[l][r] = interlayer_normalize(layer_out) if spec.normalize else layer_out
            row_ctx.append(layer_ctx)
        contexts.append(row_ctx)
    probs = softmax(outputs[n_layers - 1])
    return Trace(mode, "neuron", outputs, neuron_outputs, drops, probs, contexts)


def _targets(target, n, n_out):
    target = np.asarray(target, dtype=np.float64)
    t2 = target[None, :] if target.ndim == 1 else target
    if t2.shape != (n, n_out):
        raise ContractViolation(f"target has shape {target.shape}, expected {n} rows of {n_out}")
    return t2


def back_propagate(model: NetworkModel, mask: Optional[SubModelMask], trace: Trace, target):
    """Mean loss and mean gradients over the examples in ``trace``.

    The output delta is ``probabilities - target`` (softmax fused with
    cross-entropy). Dropped connections and dropped neurons get exactly zero
    gradient.
    """
    if mask is None:
        mask = trace.mask if trace.mask is not None else SubModelMask.full(model.layer_sizes)
    mask.check_shapes(model.store.shapes)
    probs = trace.probabilities
    n = probs.shape[0]
    y = _targets(target, n, model.layers[-1].units)
    loss = float(cross_entropy_rows(probs, np.argmax(y, axis=1)).mean())
    if trace.engine == "neuron":
        delta = _backward_neurons(model, mask, trace, y)
    else:
        delta = _backward_vector(model, mask, trace, y)
    delta.loss = loss
    return loss, delta


def _backward_vector(model, mask, trace, y):
    store = model.store
    n = y.shape[0]
    grads_w, grads_b = [None] * len(store.weights), [None] * len(store.weights)
    delta = trace.probabilities - y
    for l in range(len(model.layers) - 1, 0, -1):
        a_prev = trace.outputs[l - 1]
        grads_w[l - 1] = np.where(mask.retain[l - 1], delta.T @ a_prev / n, 0.0)
        grads_b[l - 1] = delta.sum(axis=0) / n if model.use_bias else np.zeros(delta.shape[1])
        if l - 1 == 0:
            break
        spec = model.layers[l - 1]
        w = np.where(mask.retain[l - 1], store.weights[l - 1], 0.0)
        g = delta @ w
        if spec.normalize:
            g = interlayer_normalize_backward(trace.neuron_outputs[l - 1], g)
        deriv = activation_grad(spec.activation, trace.neuron_outputs[l - 1])
        delta = np.where(trace.dropout[l - 1] != 0.0, g * deriv, 0.0)
    return ParameterDelta(grads_w, grads_b, n)


def _backward_neurons(model, mask, trace, y):
    view = MaskedWeightView(model.store, mask)
    n = y.shape[0]
    out = ParameterDelta.zeros(model.store.shapes, n)
    last = len(model.layers) - 1
    for r in range(n):
        ctxs = trace.contexts[r]
        deltas = [None] * len(model.layers)
        deltas[last] = np.zeros(model.layers[last].units)
        for l in range(last, 0, -1):
            spec = model.layers[l]
            if l == last:
                incoming = [[BackwardMessage(-1, float(trace.probabilities[r, j] - y[r, j]), 1.0)]
                            for j in range(spec.units)]
            else:
                incoming = []
                for j in range(spec.units):
                    idx, ws = view.outgoing(l, j)
                    incoming.append([BackwardMessage(int(k), float(deltas[l + 1][k]), float(w))
                                     for k, w in zip(idx, ws)])
                if spec.normalize:
                    # layer-level transform of the summed messages, then one message per neuron
                    sums = np.array([sum(m.delta * m.weight for m in msgs) for msgs in incoming])
                    adjusted = interlayer_normalize_backward(trace.neuron_outputs[l][r], sums)
                    incoming = [[BackwardMessage(-1, float(g), 1.0)] for g in adjusted]
            layer_delta = np.zeros(spec.units)
            for j in range(spec.units):
                d, grads = standard_backward(ctxs[l][j], incoming[j])
                layer_delta[j] = d
                if model.use_bias:
                    out.biases[l - 1][j] += d
                for src, gv in grads:
                    out.weights[l - 1][j, src] += gv
            deltas[l] = layer_delta
    for arr in (*out.weights, *out.biases):
        arr /= n
    return out


def predict(model: NetworkModel, x):
    """Argmax class of an inference pass over the full model; ties go to the lowest index."""
    probs, _ = feed_forward(model, None, x, INFERENCE)
    return int(np.argmax(probs)) if probs.ndim == 1 else np.argmax(probs, axis=1)
