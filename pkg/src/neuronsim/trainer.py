"""Mini-batch SGD with momentum on top of the simulated cluster."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .cluster import Cluster, ClusterConfig, ParameterServer, RoundLog, WorkerTask
from .errors import ContractViolation, NumericOverflowError
from .model import (
    INFERENCE,
    TRAINING,
    NetworkModel,
    ParameterDelta,
    WeightStore,
    back_propagate,
    feed_forward,
)
from .numeric import Rng, cross_entropy_rows
from .partition import MaskPolicy, SubModelMask, generate_submodel, split_dataset

DATA_STREAM = 0x44415441  # "DATA"
DROPOUT_STREAM = 0x44524F50  # "DROP"
METRICS_HEADER = ("iteration", "loss", "accuracy", "wall_ms")
PROBE_SIZE = 1000


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.3
    momentum: float = 0.98
    input_retention: float = 0.8
    hidden_retention: float = 0.5
    batch_size: int = 100
    max_iterations: int = 10_000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractViolation(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractViolation(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("input_retention", "hidden_retention"):
            p = getattr(self, name)
            if not 0 < p <= 1:
                raise ContractViolation(f"{name} must lie in (0, 1], got {p}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch size must be at least 1, got {self.batch_size}")
        if self.max_iterations < 0:
            raise ContractViolation("max_iterations must be non-negative")


def sgd_momentum_step(store: WeightStore, delta: ParameterDelta, hp: Hyperparams) -> WeightStore:
    """Classical momentum, in place: ``v = a*v + lr*g``, ``p = p - v``."""
    if delta.shapes != store.shapes:
        raise ContractViolation(f"delta shapes {delta.shapes} do not match store {store.shapes}")
    groups = (("weights", store.weights, store.vel_weights, delta.weights),
              ("biases", store.biases, store.vel_biases, delta.biases))
    staged = []
    for name, params, vels, grads in groups:
        for l, (p, v, g) in enumerate(zip(params, vels, grads)):
            new_v = hp.momentum * v + hp.learning_rate * g
            new_p = p - new_v
            if not (np.isfinite(new_v).all() and np.isfinite(new_p).all()):
                raise NumericOverflowError(f"non-finite update for {name}[{l}]", neuron=(name, l))
            staged.append((p, new_p, v, new_v))
    for p, new_p, v, new_v in staged:
        p[...] = new_p
        v[...] = new_v
    return store


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def train_batch(model: NetworkModel, mask: Optional[SubModelMask], images, labels,
                rng: Optional[Rng] = None, engine: str = "vector") -> ParameterDelta:
    """Training-mode forward/backward over one batch; fresh dropout masks per
    example. Gradients and loss are batch means."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[0] == 0:
        raise ContractViolation("a batch must be a non-empty 2-D array of examples")
    _, trace = feed_forward(model, mask, images, TRAINING, rng, engine)
    _, delta = back_propagate(model, mask, trace, one_hot(labels, model.layers[-1].units))
    return delta


def evaluate(model: NetworkModel, images, labels, chunk: int = 2000) -> float:
    """Fraction of examples whose inference-mode argmax equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractViolation("evaluation set is empty")
    correct = 0
    for start in range(0, labels.size, chunk):
        probs, _ = feed_forward(model, None, images[start:start + chunk], INFERENCE)
        correct += int((np.argmax(probs, axis=1) == labels[start:start + chunk]).sum())
    return correct / labels.size


def inference_loss(model: NetworkModel, images, labels) -> float:
    probs, _ = feed_forward(model, None, images, INFERENCE)
    return float(cross_entropy_rows(probs, np.asarray(labels)).mean())


class BatchStream:
    """Endless batches from one worker's partition, reshuffled every epoch."""

    def __init__(self, indices, rng: Rng):
        self.indices = np.asarray(indices)
        if self.indices.size == 0:
            raise ContractViolation("a worker needs at least one example")
        self._rng = rng
        self._epoch = 0
        self._order = self._shuffle()
        self._pos = 0

    def _shuffle(self):
        perm = self._rng.derive(self._epoch).permutation(self.indices.size)
        return self.indices[perm]

    def next(self, size: int) -> np.ndarray:
        out = []
        need = size
        while need:
            if self._pos == self._order.size:
                self._epoch += 1
                self._order = self._shuffle()
                self._pos = 0
            take = min(need, self._order.size - self._pos)
            out.append(self._order[self._pos:self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(out)


@dataclass
class EvalPoint:
    iteration: int
    loss: float
    accuracy: float
    wall_ms: float


@dataclass
class TrainMetrics:
    points: List[EvalPoint] = field(default_factory=list)
    model: Optional[NetworkModel] = None
    masks: Optional[List[SubModelMask]] = None
    wall_s: float = 0.0
    round_log: Optional[RoundLog] = None

    def add(self, point: EvalPoint):
        if self.points and point.iteration <= self.points[-1].iteration:
            raise ContractViolation("evaluation iterations must increase")
        self.points.append(point)

    @property
    def final_accuracy(self) -> float:
        return self.points[-1].accuracy

    def to_csv(self, stream=None) -> str:
        out = stream if stream is not None else io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for p in self.points:
            writer.writerow((p.iteration, f"{p.loss:.10g}", f"{p.accuracy:.6f}", f"{p.wall_ms:.3f}"))
        return out.getvalue() if stream is None else ""


def _worker_masks(model, policy, n_workers):
    if policy is None:
        return [None] * n_workers
    return [generate_submodel(model.layer_sizes, policy, w, Rng(policy.seed)) for w in range(n_workers)]


class _Evaluator:
    """Evaluation bookkeeping shared by the cluster and sequential loops."""

    def __init__(self, model, train_set, test_set, interval, deterministic, metrics):
        self.model = model
        self.test = test_set
        self.interval = interval
        self.deterministic = deterministic
        self.metrics = metrics
        self.losses = []
        self.t0 = time.perf_counter()
        n_probe = min(PROBE_SIZE, len(train_set.labels))
        self.probe = (train_set.images[:n_probe], train_set.labels[:n_probe])

    def _wall(self):
        # deterministic runs log a zero clock so metric files are reproducible byte for byte
        return 0.0 if self.deterministic else (time.perf_counter() - self.t0) * 1000.0

    def initial(self, store):
        m = self.model.with_store(store)
        self.metrics.add(EvalPoint(0, inference_loss(m, *self.probe),
                                   evaluate(m, self.test.images, self.test.labels), self._wall()))

    def on_version(self, version, snapshot, delta, final):
        self.losses.append(delta.loss)
        if version % self.interval == 0 or version == final:
            m = self.model.with_store(snapshot)
            loss = float(np.mean(self.losses))
            self.losses = []
            self.metrics.add(EvalPoint(version, loss, evaluate(m, self.test.images, self.test.labels),
                                       self._wall()))


def train(config: ClusterConfig, hp: Hyperparams, train_set, test_set, model: NetworkModel,
          policy: Optional[MaskPolicy] = None, eval_interval: int = 500,
          mask_refresh: str = "run", engine: str = "vector",
          round_log: Optional[RoundLog] = None) -> TrainMetrics:
    """Run ``hp.max_iterations`` parameter-server versions under ``config``.

    ``train_set``/``test_set`` expose ``images`` (n x features) and
    ``labels``. The returned metrics carry the final model and the masks.
    """
    if eval_interval < 1:
        raise ContractViolation("eval_interval must be at least 1")
    if mask_refresh not in ("run", "batch"):
        raise ContractViolation(f"mask_refresh must be 'run' or 'batch', got {mask_refresh!r}")
    root = Rng(config.seed)
    n_workers = config.n_workers
    parts = split_dataset(len(train_set.labels), n_workers, root)
    masks = _worker_masks(model, policy, n_workers)
    metrics = TrainMetrics(masks=masks, round_log=round_log)
    ev = _Evaluator(model, train_set, test_set, eval_interval, config.deterministic, metrics)
    final = hp.max_iterations

    def update(store, delta):
        return sgd_momentum_step(store, delta, hp)

    server = ParameterServer(model.store, config, update,
                             on_version=lambda v, s, d: ev.on_version(v, s, d, final))
    ev.initial(server.pull()[0])

    def make_task(w):
        stream = BatchStream(parts[w].indices, root.derive(DATA_STREAM, w))

        def compute(snapshot, round_index):
            mask = masks[w]
            if policy is not None and mask_refresh == "batch":
                mask = generate_submodel(model.layer_sizes, policy, w, Rng(policy.seed), step=round_index)
            idx = stream.next(hp.batch_size)
            rng = root.derive(DROPOUT_STREAM, w, round_index)
            return train_batch(model.with_store(snapshot), mask, train_set.images[idx],
                               train_set.labels[idx], rng, engine)

        return WorkerTask(w, compute)

    cluster = Cluster(config, server, [make_task(w) for w in range(n_workers)], round_log)
    cluster.run(hp.max_iterations)
    metrics.model = model.with_store(server.master_copy())
    metrics.wall_s = time.perf_counter() - ev.t0
    return metrics


def train_sequential(hp: Hyperparams, train_set, test_set, model: NetworkModel,
                     seed: int = 0, mask: Optional[SubModelMask] = None,
                     eval_interval: int = 500, engine: str = "vector") -> TrainMetrics:
    """Plain single-process loop with no parameter server.

    Consumes data and dropout streams exactly as worker 0 of a one-worker
    cluster, which makes it an oracle for the cluster path.
    """
    root = Rng(seed)
    part = split_dataset(len(train_set.labels), 1, root)[0]
    stream = BatchStream(part.indices, root.derive(DATA_STREAM, 0))
    store = model.store.copy()
    metrics = TrainMetrics(masks=[mask])
    ev = _Evaluator(model, train_set, test_set, eval_interval, True, metrics)
    ev.initial(store)
    for it in range(hp.max_iterations):
        idx = stream.next(hp.batch_size)
        rng = root.derive(DROPOUT_STREAM, 0, it)
        delta = train_batch(model.with_store(store), mask, train_set.images[idx],
                            train_set.labels[idx], rng, engine)
        sgd_momentum_step(store, delta, hp)
        ev.on_version(it + 1, store, delta, hp.max_iterations)
    metrics.model = model.with_store(store)
    metrics.wall_s = time.perf_counter() - ev.t0
    return metrics
