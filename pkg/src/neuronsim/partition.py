"""Dataset splitting and irregular sub-model generation.

A sub-model is the parent network with a random subset of connections
removed (DropConnect-style). It keeps the parent's input and output layers
and reads and writes the parent's weight arrays through
:class:`MaskedWeightView`, so every sub-model trains the same shared weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ContractViolation
from .numeric import Rng

MASK_STREAM = 0x4D41534B  # "MASK"
SPLIT_STREAM = 0x53504C54  # "SPLT"


@dataclass(frozen=True)
class DataPartition:
    worker_id: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def split_dataset(n_examples: int, n_workers: int, rng: Rng) -> List[DataPartition]:
    """Shuffle ``range(n_examples)`` and deal it round-robin to the workers."""
    if n_workers < 1:
        raise ContractViolation(f"need at least one worker, got {n_workers}")
    if n_examples < n_workers:
        raise ContractViolation(
            f"cannot split {n_examples} examples across {n_workers} workers")
    order = rng.derive(SPLIT_STREAM).permutation(n_examples)
    return [DataPartition(w, order[w::n_workers]) for w in range(n_workers)]


@dataclass(frozen=True)
class MaskPolicy:
    connection_drop_probability: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.connection_drop_probability < 1.0:
            raise ContractViolation(
                "connection drop probability must lie in [0, 1), "
                f"got {self.connection_drop_probability}")


class SubModelMask:
    """Boolean retain matrix per adjacent layer pair, shaped like the weights."""

    def __init__(self, retain: Sequence[np.ndarray]):
        self.retain = [np.asarray(r, dtype=bool) for r in retain]
        for l in range(1, len(self.retain)):
            if self.retain[l].shape[1] != self.retain[l - 1].shape[0]:
                raise ContractViolation(
                    f"mask layer {l} has {self.retain[l].shape[1]} inputs but layer "
                    f"{l - 1} has {self.retain[l - 1].shape[0]} outputs")

    @classmethod
    def full(cls, layer_sizes: Sequence[int]) -> "SubModelMask":
        return cls([np.ones((o, i), dtype=bool) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])])

    @property
    def layer_sizes(self):
        return [self.retain[0].shape[1]] + [r.shape[0] for r in self.retain]

    @property
    def shapes(self):
        return [r.shape for r in self.retain]

    def is_full(self) -> bool:
        return all(r.all() for r in self.retain)

    def retained_fraction(self) -> float:
        kept = sum(int(r.sum()) for r in self.retain)
        return kept / sum(r.size for r in self.retain)

    def check_shapes(self, shapes):
        if [tuple(s) for s in shapes] != [r.shape for r in self.retain]:
            raise ContractViolation(
                f"mask shapes {self.shapes} do not match weight shapes {list(shapes)}")

    def violations(self) -> List[str]:
        """Human-readable list of broken connectivity invariants (empty if valid)."""
        problems = []
        last = self.retain[-1]
        starved = np.flatnonzero(~last.any(axis=1))
        if starved.size:
            problems.append(f"output neurons without incoming edges: {starved.tolist()}")
        for h in range(1, len(self.retain)):
            inc = self.retain[h - 1].any(axis=1)
            out = self.retain[h].any(axis=0)
            dangling = np.flatnonzero(inc != out)
            if dangling.size:
                problems.append(f"hidden layer {h} neurons half-connected: {dangling.tolist()}")
        return problems

    def is_valid(self) -> bool:
        return not self.violations()

    def __eq__(self, other):
        if not isinstance(other, SubModelMask):
            return NotImplemented
        return len(self.retain) == len(other.retain) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.retain, other.retain))

    def __repr__(self):
        return f"SubModelMask(layers={self.layer_sizes}, retained={self.retained_fraction():.3f})"


def draw_connections(layer_sizes: Sequence[int], drop_probability: float, rng: Rng) -> SubModelMask:
    """Independent keep/drop per connection, before any repair."""
    retain = []
    for l, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        retain.append(rng.derive(l).random((n_out, n_in)) >= drop_probability)
    return SubModelMask(retain)


def _isolate_dangling(retain):
    changed = True
    while changed:
        changed = False
        for h in range(1, len(retain)):
            inc = retain[h - 1].any(axis=1)
            out = retain[h].any(axis=0)
            bad = inc != out
            if bad.any():
                retain[h - 1][bad, :] = False
                retain[h][:, bad] = False
                changed = True


def _revive_edge_into(retain, layer, neuron, rng):
    # layer indexes retain[layer]: edge into ``neuron`` of layer ``layer + 1``
    while True:
        source = int(rng.integers(retain[layer].shape[1]))
        retain[layer][neuron, source] = True
        if layer == 0:
            return
        # source sits in hidden layer ``layer``; it is live iff it has an incoming edge
        if retain[layer - 1][source].any():
            return
        layer, neuron = layer - 1, source


def repair_mask(mask: SubModelMask, rng: Rng) -> SubModelMask:
    """Make ``mask`` satisfy the connectivity invariants.

    Half-connected hidden neurons lose all their edges (cascading to a fixed
    point). Output neurons left without inputs get one random incoming edge
    back; if that edge comes from a removed hidden neuron, the neuron is
    revived with one random incoming edge of its own, down to the input layer.
    """
    retain = [r.copy() for r in mask.retain]
    _isolate_dangling(retain)
    last = len(retain) - 1
    for j in np.flatnonzero(~retain[last].any(axis=1)):
        _revive_edge_into(retain, last, int(j), rng)
    return SubModelMask(retain)


def generate_submodel(layer_sizes: Sequence[int], policy: MaskPolicy, worker_id: int,
                      rng: Rng = None, step: int = 0) -> SubModelMask:
    """Random sparse sub-model for one worker.

    Pure in ``(layer_sizes, policy, worker_id, seed, step)``: the stream is
    derived from the seed identity, never from shared generator state.
    """
    base = rng if rng is not None else Rng(policy.seed)
    stream = base.derive(MASK_STREAM, worker_id, step)
    if policy.connection_drop_probability == 0.0:
        return SubModelMask.full(layer_sizes)
    drawn = draw_connections(layer_sizes, policy.connection_drop_probability, stream.derive(0))
    return repair_mask(drawn, stream.derive(1))


class _Absent:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self):
        return False

    def __repr__(self):
        return "ABSENT"


ABSENT = _Absent()


class MaskedWeightView:
    """Sub-model view over any object with a ``weights`` list of arrays.

    Reads of dropped connections return :data:`ABSENT`; writes go straight
    into the parent's arrays (no copy).
    """

    def __init__(self, store, mask: SubModelMask = None):
        shapes = [w.shape for w in store.weights]
        if mask is None:
            mask = SubModelMask([np.ones(s, dtype=bool) for s in shapes])
        mask.check_shapes(shapes)
        self.store = store
        self.mask = mask

    def get(self, layer, target, source):
        if not self.mask.retain[layer][target, source]:
            return ABSENT
        return float(self.store.weights[layer][target, source])

    def _require(self, layer, target, source):
        if not self.mask.retain[layer][target, source]:
            raise ContractViolation(
                f"connection ({layer}, {target}, {source}) is not part of this sub-model")

    def set(self, layer, target, source, value):
        self._require(layer, target, source)
        self.store.weights[layer][target, source] = value

    def add(self, layer, target, source, value):
        self._require(layer, target, source)
        self.store.weights[layer][target, source] += value

    def incoming(self, layer, target):
        """Retained ``(source indices, weights)`` feeding ``target``."""
        idx = np.flatnonzero(self.mask.retain[layer][target])
        return idx, self.store.weights[layer][target, idx]

    def outgoing(self, layer, source):
        """Retained ``(target indices, weights)`` leaving ``source``."""
        idx = np.flatnonzero(self.mask.retain[layer][:, source])
        return idx, self.store.weights[layer][idx, source]

    def effective(self, layer):
        """Dense weight matrix with dropped connections zeroed."""
        return np.where(self.mask.retain[layer], self.store.weights[layer], 0.0)
