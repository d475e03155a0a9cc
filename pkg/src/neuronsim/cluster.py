"""In-process cluster: task groups, a parameter server, and the two
synchronization schemes.

* AllReduce: every worker pushes one delta per round; when the round is
  complete the server averages the deltas (ascending worker id) and applies
  a single update.
* Downpour: tasks of a group compute on the same snapshot, the group
  averages its deltas and pushes once; groups never wait for each other.

Within a group the tasks run bulk-synchronously (compute, barrier, push).
With ``deterministic=True`` all groups and tasks are stepped round-robin on
the calling thread; otherwise every group gets its own thread and its tasks
run on a thread pool.
"""
from __future__ import annotations

import csv
import enum
import io
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractViolation, GroupAborted, ProtocolError, StaleUpdateError
from .model import ParameterDelta, WeightStore


class SyncMode(str, enum.Enum):
    ALLREDUCE = "allreduce"
    DOWNPOUR = "downpour"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractViolation(f"unknown sync mode {value!r}") from None


@dataclass(frozen=True)
class ClusterConfig:
    n_groups: int = 1
    tasks_per_group: int = 1
    sync_mode: SyncMode = SyncMode.ALLREDUCE
    deterministic: bool = True
    seed: int = 0
    max_staleness: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "sync_mode", SyncMode.parse(self.sync_mode))
        if self.n_groups < 1 or self.tasks_per_group < 1:
            raise ContractViolation("a cluster needs at least one group with at least one task")
        if not 0 <= int(self.seed) < 2**64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.max_staleness is not None and self.max_staleness < 0:
            raise ContractViolation("max_staleness must be non-negative")

    @property
    def n_workers(self) -> int:
        return self.n_groups * self.tasks_per_group

    def workers_in(self, group_id: int) -> List[int]:
        start = group_id * self.tasks_per_group
        return list(range(start, start + self.tasks_per_group))

    @property
    def participants(self) -> int:
        """Pushes that make up one server version."""
        return self.n_workers if self.sync_mode is SyncMode.ALLREDUCE else 1


@dataclass(frozen=True)
class Ack:
    worker_id: int
    version: int
    applied: bool


def merge_mean(deltas: Sequence[ParameterDelta]) -> ParameterDelta:
    """Arithmetic mean of deltas, summed in the order given."""
    if not deltas:
        raise ContractViolation("nothing to merge")
    acc = deltas[0].copy()
    for d in deltas[1:]:
        for a, b in zip(acc.weights, d.weights):
            a += b
        for a, b in zip(acc.biases, d.biases):
            a += b
    k = len(deltas)
    if k > 1:
        for arr in (*acc.weights, *acc.biases):
            arr /= k
    acc.sample_count = sum(d.sample_count for d in deltas)
    acc.loss = sum(d.loss for d in deltas) / k
    return acc


class ParameterServer:
    """Holds the authoritative parameters and publishes versioned,
    read-only snapshots.

    ``update(store, delta)`` applies a merged delta to the mutable master
    store in place. ``on_version(version, snapshot, delta)`` runs after each
    applied update, while pushes are still serialized.
    """

    def __init__(self, store: WeightStore, config: ClusterConfig,
                 update: Callable[[WeightStore, ParameterDelta], WeightStore],
                 max_version: Optional[int] = None,
                 on_version: Optional[Callable] = None,
                 record_history: bool = False):
        self.config = config
        self.mode = config.sync_mode
        self._master = store.copy()
        self._snapshot = self._master.frozen()
        self._version = 0
        self._update = update
        self._on_version = on_version
        self.max_version = max_version
        self.pending: Dict[int, ParameterDelta] = {}
        self._cond = threading.Condition()
        self._aborted: Optional[BaseException] = None
        self.history = {0: self._snapshot} if record_history else None

    @property
    def version(self) -> int:
        return self._version

    @property
    def closed(self) -> bool:
        return self.max_version is not None and self._version >= self.max_version

    def pull(self):
        """``(snapshot, version)``; the snapshot is immutable and never torn."""
        with self._cond:
            return self._snapshot, self._version

    def _check(self, delta):
        if delta.shapes != self._master.shapes or \
                [b.shape for b in delta.biases] != [b.shape for b in self._master.biases]:
            raise ContractViolation(
                f"delta shapes {delta.shapes} do not match parameters {self._master.shapes}")

    def push(self, worker_id: int, delta: ParameterDelta, base_version: Optional[int] = None) -> Ack:
        self._check(delta)
        with self._cond:
            if self._aborted is not None:
                raise GroupAborted(f"server aborted: {self._aborted}")
            if self.closed:
                return Ack(worker_id, self._version, False)
            if self.mode is SyncMode.DOWNPOUR:
                limit = self.config.max_staleness
                if limit is not None and base_version is not None and \
                        self._version - base_version > limit:
                    raise StaleUpdateError(
                        f"push from {worker_id} is {self._version - base_version} versions stale "
                        f"(limit {limit})")
                self._apply(delta)
                return Ack(worker_id, self._version, True)
            if worker_id in self.pending:
                raise ProtocolError(f"worker {worker_id} already pushed in round {self._version}")
            self.pending[worker_id] = delta
            if len(self.pending) == self.config.participants:
                self.allreduce_merge([self.pending[w] for w in sorted(self.pending)])
                return Ack(worker_id, self._version, True)
            return Ack(worker_id, self._version, False)

    def allreduce_merge(self, deltas: Sequence[ParameterDelta]) -> WeightStore:
        """Average one full round of deltas and apply it; version advances by one."""
        with self._cond:
            if len(deltas) != self.config.participants:
                raise ProtocolError(
                    f"round needs {self.config.participants} deltas, got {len(deltas)}")
            for d in deltas:
                self._check(d)
            self._apply(merge_mean(list(deltas)))
            return self._snapshot

    def _apply(self, delta):
        self._update(self._master, delta)
        self._version += 1
        self._snapshot = self._master.frozen()
        self.pending = {}
        if self.history is not None:
            self.history[self._version] = self._snapshot
        if self._on_version is not None:
            self._on_version(self._version, self._snapshot, delta)
        self._cond.notify_all()

    def wait_for_version(self, version: int, timeout: Optional[float] = None) -> int:
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._version >= version or self.closed or self._aborted is not None, timeout)
            if self._aborted is not None:
                raise GroupAborted(f"server aborted: {self._aborted}")
            if not ok:
                raise TimeoutError(f"version {version} not reached")
            return self._version

    def abort(self, reason: BaseException):
        with self._cond:
            if self._aborted is None:
                self._aborted = reason
            self._cond.notify_all()

    def master_copy(self) -> WeightStore:
        with self._cond:
            return self._master.copy()


class RoundLog:
    """CSV stream, one record per worker per round. With ``timed=False`` the
    clock column is written as zero so reruns are byte-identical."""

    FIELDS = ("round", "version", "group", "worker", "loss", "wall_time_ms")

    def __init__(self, stream=None, timed=True):
        self.stream = stream if stream is not None else io.StringIO()
        self._writer = csv.writer(self.stream, lineterminator="\n")
        self._writer.writerow(self.FIELDS)
        self._lock = threading.Lock()
        self._t0 = time.perf_counter()
        self.timed = timed

    def record(self, round_index, version, group, worker, loss):
        wall = (time.perf_counter() - self._t0) * 1000.0 if self.timed else 0.0
        with self._lock:
            self._writer.writerow((round_index, version, group, worker, f"{loss:.10g}", f"{wall:.3f}"))

    def getvalue(self):
        return self.stream.getvalue()


@dataclass
class WorkerTask:
    """``compute(snapshot, round_index) -> ParameterDelta`` runs one local batch."""

    worker_id: int
    compute: Callable[[WeightStore, int], ParameterDelta]


@dataclass
class GroupResult:
    group_id: int
    rounds: int = 0
    pushes: int = 0
    last_version: int = 0
    losses: List[float] = field(default_factory=list)


class TaskGroup:
    def __init__(self, group_id, config: ClusterConfig, tasks: Sequence[WorkerTask],
                 server: ParameterServer, log: Optional[RoundLog] = None, pool=None):
        self.group_id = group_id
        self.config = config
        self.tasks = sorted(tasks, key=lambda t: t.worker_id)
        self.server = server
        self.log = log
        self.pool = pool
        self.result = GroupResult(group_id)

    def _compute_all(self, snapshot, round_index):
        def run(task):
            try:
                return task.compute(snapshot, round_index)
            except Exception as exc:
                raise GroupAborted(
                    f"group {self.group_id} aborted: worker {task.worker_id} failed in round "
                    f"{round_index}: {type(exc).__name__}: {exc}",
                    group_id=self.group_id, worker_id=task.worker_id) from exc

        if self.pool is None or len(self.tasks) == 1:
            return [run(t) for t in self.tasks]
        # collecting every future is the group barrier
        return list(self.pool.map(run, self.tasks))

    def step(self, round_index: int) -> bool:
        """One BSP superstep: pull, local compute, barrier, push.

        Returns False once the server no longer accepts updates.
        """
        server = self.server
        if server.closed:
            return False
        snapshot, version = server.pull()
        deltas = self._compute_all(snapshot, round_index)
        res = self.result
        res.rounds += 1
        if self.config.sync_mode is SyncMode.ALLREDUCE:
            for task, delta in zip(self.tasks, deltas):
                ack = server.push(task.worker_id, delta)
                res.pushes += 1
                res.last_version = ack.version
                if self.log:
                    self.log.record(round_index, ack.version, self.group_id, task.worker_id, delta.loss)
        else:
            merged = merge_mean(deltas)
            ack = server.push(self.group_id, merged, base_version=version)
            res.pushes += int(ack.applied)
            res.last_version = ack.version
            if self.log:
                for task, delta in zip(self.tasks, deltas):
                    self.log.record(round_index, ack.version, self.group_id, task.worker_id, delta.loss)
            if not ack.applied:
                return False
        res.losses.append(float(np.mean([d.loss for d in deltas])))
        return True


def run_group(group: TaskGroup, max_rounds: Optional[int] = None) -> GroupResult:
    """Drive one group until the server closes (or ``max_rounds`` pass).

    In AllReduce mode each round waits for the global round to complete
    before pulling again.
    """
    r = 0
    while max_rounds is None or r < max_rounds:
        if not group.step(r):
            break
        if group.config.sync_mode is SyncMode.ALLREDUCE:
            group.server.wait_for_version(r + 1)
        r += 1
    return group.result


class Cluster:
    """Wires workers into groups around one parameter server."""

    def __init__(self, config: ClusterConfig, server: ParameterServer,
                 tasks: Sequence[WorkerTask], log: Optional[RoundLog] = None):
        if len(tasks) != config.n_workers:
            raise ContractViolation(f"config has {config.n_workers} workers but {len(tasks)} tasks given")
        by_id = {t.worker_id: t for t in tasks}
        if sorted(by_id) != list(range(config.n_workers)):
            raise ContractViolation("worker ids must be 0..n_workers-1")
        self.config = config
        self.server = server
        self.log = log
        self._tasks = by_id

    def _groups(self, pool_factory):
        return [TaskGroup(g, self.config, [self._tasks[w] for w in self.config.workers_in(g)],
                          self.server, self.log, pool_factory())
                for g in range(self.config.n_groups)]

    def run(self, max_versions: int) -> List[GroupResult]:
        self.server.max_version = max_versions
        if self.config.deterministic and self.log is not None:
            self.log.timed = False
        if max_versions <= 0:
            return [GroupResult(g) for g in range(self.config.n_groups)]
        if self.config.deterministic:
            return self._run_serial()
        return self._run_threaded()

    def _run_serial(self):
        groups = self._groups(lambda: None)
        r = 0
        while not self.server.closed:
            progressed = False
            for g in groups:
                progressed |= g.step(r)
            if not progressed:
                break
            r += 1
        return [g.result for g in groups]

    def _run_threaded(self):
        pools = []

        def make_pool():
            if self.config.tasks_per_group == 1:
                return None
            pool = ThreadPoolExecutor(self.config.tasks_per_group)
            pools.append(pool)
            return pool

        groups = self._groups(make_pool)
        errors = []

        def drive(g):
            try:
                run_group(g)
            except BaseException as exc:
                errors.append(exc)
                self.server.abort(exc)

        threads = [threading.Thread(target=drive, args=(g,), name=f"group-{g.group_id}") for g in groups]
        try:
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        finally:
            for pool in pools:
                pool.shutdown()
        if errors:
            first = next((e for e in errors if isinstance(e, GroupAborted) and e.worker_id is not None),
                         errors[0])
            raise first
        return [g.result for g in groups]
