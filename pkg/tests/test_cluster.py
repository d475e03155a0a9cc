import csv
import io
import threading

import numpy as np
import pytest

from neuronsim.cluster import (
    Cluster,
    ClusterConfig,
    ParameterServer,
    RoundLog,
    SyncMode,
    TaskGroup,
    WorkerTask,
    merge_mean,
    run_group,
)
from neuronsim.errors import ContractViolation, GroupAborted, ProtocolError, StaleUpdateError
from neuronsim.model import ParameterDelta, WeightStore

SHAPES = [(3, 4), (2, 3)]


def store():
    rng = np.random.default_rng(0)
    return WeightStore([rng.standard_normal(s) for s in SHAPES], [np.zeros(s[0]) for s in SHAPES])


def delta(value=1.0, loss=0.0):
    d = ParameterDelta([np.full(s, value) for s in SHAPES], [np.full(s[0], value) for s in SHAPES], 1, loss)
    return d


def sgd(store, d, lr=0.1):
    for p, g in zip(store.weights + store.biases, d.weights + d.biases):
        p -= lr * g
    return store


def server(mode="allreduce", workers=4, **kw):
    cfg = ClusterConfig(1, workers, mode)
    return ParameterServer(store(), cfg, sgd, **kw)


def test_pull_after_init():
    s = server()
    snap, version = s.pull()
    assert version == 0
    assert snap.equals(store())
    with pytest.raises(ValueError):
        snap.weights[0][0, 0] = 1.0


def test_downpour_versions_increase():
    s = server("downpour")
    assert s.push(0, delta()).version == 1
    assert s.push(1, delta()).version == 2


def test_allreduce_incomplete_round_keeps_version():
    s = server(workers=4)
    for w in range(3):
        ack = s.push(w, delta())
        assert not ack.applied and ack.version == 0
    assert s.pull()[1] == 0
    assert s.push(3, delta()).version == 1
    assert s.pull()[1] == 1


def test_allreduce_duplicate_push():
    s = server(workers=4)
    s.push(0, delta())
    with pytest.raises(ProtocolError):
        s.push(0, delta())


def test_push_rejects_wrong_shape():
    s = server()
    bad = ParameterDelta([np.zeros((3, 3)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)])
    with pytest.raises(ContractViolation):
        s.push(0, bad)


def test_merge_identical_deltas():
    m = merge_mean([delta(0.3), delta(0.3), delta(0.3)])
    for a, b in zip(m.weights, delta(0.3).weights):
        assert np.array_equal(a, b)


def test_merge_opposite_deltas_cancel():
    m = merge_mean([delta(1.0), delta(-1.0)])
    assert all(not w.any() for w in m.weights)


def test_merge_single_delta_is_identity():
    rng = np.random.default_rng(3)
    d = ParameterDelta([rng.standard_normal(s) for s in SHAPES], [rng.standard_normal(s[0]) for s in SHAPES])
    m = merge_mean([d])
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m.weights + m.biases, d.weights + d.biases))


def test_merge_is_permutation_invariant():
    rng = np.random.default_rng(8)
    ds = [ParameterDelta([rng.standard_normal(s) for s in SHAPES], [rng.standard_normal(s[0]) for s in SHAPES])
          for _ in range(7)]
    base = merge_mean(ds)
    for _ in range(20):
        perm = rng.permutation(7)
        m = merge_mean([ds[i] for i in perm])
        for a, b in zip(m.weights + m.biases, base.weights + base.biases):
            assert np.max(np.abs(a - b)) <= 1e-12


def test_allreduce_merge_needs_every_worker():
    s = server(workers=3)
    with pytest.raises(ProtocolError):
        s.allreduce_merge([delta(), delta()])
    s.allreduce_merge([delta(), delta(), delta()])
    assert s.version == 1


def test_allreduce_applies_mean_update():
    s = server(workers=2)
    s.push(0, delta(1.0))
    s.push(1, delta(3.0))
    snap, _ = s.pull()
    want = sgd(store(), delta(2.0))
    assert snap.equals(want)


def test_downpour_staleness_limit():
    cfg = ClusterConfig(2, 1, "downpour", max_staleness=1)
    s = ParameterServer(store(), cfg, sgd)
    s.push(0, delta(), base_version=0)
    s.push(1, delta(), base_version=0)
    with pytest.raises(StaleUpdateError):
        s.push(0, delta(), base_version=0)


def test_concurrent_pulls_see_published_versions():
    cfg = ClusterConfig(4, 1, "downpour", deterministic=False)
    s = ParameterServer(store(), cfg, sgd, record_history=True)
    seen = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            seen.append(s.pull())

    def writer(w):
        for _ in range(50):
            s.push(w, delta(0.01 * (w + 1)))

    readers = [threading.Thread(target=reader) for _ in range(3)]
    writers = [threading.Thread(target=writer, args=(w,)) for w in range(4)]
    for t in readers + writers:
        t.start()
    for t in writers:
        t.join()
    stop.set()
    for t in readers:
        t.join()
    assert s.version == 200
    assert sorted(s.history) == list(range(201))
    for snap, version in seen:
        assert snap.equals(s.history[version])


def counting_task(worker_id, calls, fail_at=None):
    def compute(snapshot, round_index):
        if fail_at is not None and round_index == fail_at:
            raise RuntimeError("disk on fire")
        calls.append((worker_id, round_index))
        return delta(0.01 * (worker_id + 1), loss=float(worker_id))
    return WorkerTask(worker_id, compute)


def test_single_worker_group_runs_sequential_loop():
    cfg = ClusterConfig(1, 1)
    s = ParameterServer(store(), cfg, sgd, max_version=5)
    calls = []
    result = run_group(TaskGroup(0, cfg, [counting_task(0, calls)], s))
    assert calls == [(0, r) for r in range(5)]
    assert result.rounds == 5 and s.version == 5
    want = store()
    for _ in range(5):
        sgd(want, delta(0.01))
    assert s.pull()[0].equals(want)


@pytest.mark.parametrize("mode", ["allreduce", "downpour"])
def test_cluster_runs_to_version_limit(mode):
    cfg = ClusterConfig(2, 3, mode, deterministic=False)
    s = ParameterServer(store(), cfg, sgd)
    calls = []
    tasks = [counting_task(w, calls) for w in range(6)]
    Cluster(cfg, s, tasks).run(12)
    assert s.version == 12


@pytest.mark.parametrize("mode", ["allreduce", "downpour"])
def test_deterministic_runs_repeat_bitwise(mode):
    def run():
        cfg = ClusterConfig(2, 2, mode, deterministic=True)
        s = ParameterServer(store(), cfg, sgd)
        log = RoundLog()
        calls = []
        Cluster(cfg, s, [counting_task(w, calls) for w in range(4)], log).run(10)
        return s.master_copy(), calls

    (a, ca), (b, cb) = run(), run()
    assert a.equals(b)
    assert ca == cb


def test_worker_failure_aborts_group():
    cfg = ClusterConfig(2, 2, "allreduce", deterministic=False)
    s = ParameterServer(store(), cfg, sgd)
    calls = []
    tasks = [counting_task(w, calls, fail_at=3 if w == 2 else None) for w in range(4)]
    with pytest.raises(GroupAborted) as err:
        Cluster(cfg, s, tasks).run(10)
    assert err.value.group_id == 1 and err.value.worker_id == 2
    assert "disk on fire" in str(err.value)
    assert s.version == 3


def test_worker_failure_deterministic():
    cfg = ClusterConfig(1, 2)
    s = ParameterServer(store(), cfg, sgd)
    tasks = [counting_task(w, [], fail_at=1 if w == 1 else None) for w in range(2)]
    with pytest.raises(GroupAborted):
        Cluster(cfg, s, tasks).run(5)


def test_round_log_csv():
    cfg = ClusterConfig(1, 2)
    s = ParameterServer(store(), cfg, sgd)
    log = RoundLog()
    Cluster(cfg, s, [counting_task(w, []) for w in range(2)], log).run(3)
    rows = list(csv.DictReader(io.StringIO(log.getvalue())))
    assert list(rows[0]) == ["round", "version", "group", "worker", "loss", "wall_time_ms"]
    assert len(rows) == 6
    assert [r["version"] for r in rows] == ["0", "1", "1", "2", "2", "3"]
    assert {r["worker"] for r in rows} == {"0", "1"}


def test_cluster_config_validation():
    with pytest.raises(ContractViolation):
        ClusterConfig(0, 1)
    with pytest.raises(ContractViolation):
        ClusterConfig(1, 1, "gossip")
    cfg = ClusterConfig(3, 4, "downpour")
    assert cfg.n_workers == 12
    assert cfg.workers_in(2) == [8, 9, 10, 11]
    assert cfg.sync_mode is SyncMode.DOWNPOUR


def test_version_strictly_monotonic_under_threads():
    versions = []
    cfg = ClusterConfig(3, 2, "downpour", deterministic=False)
    s = ParameterServer(store(), cfg, sgd, on_version=lambda v, snap, d: versions.append(v))
    Cluster(cfg, s, [counting_task(w, []) for w in range(6)]).run(30)
    assert versions == list(range(1, 31))


def test_allreduce_round_snapshot_shared_by_all_workers():
    cfg = ClusterConfig(2, 2, "allreduce", deterministic=False)
    s = ParameterServer(store(), cfg, sgd)
    seen = {}
    lock = threading.Lock()

    def task(w):
        def compute(snapshot, r):
            with lock:
                seen.setdefault(r, []).append(snapshot)
            return delta(0.1 * (w + 1))
        return WorkerTask(w, compute)

    Cluster(cfg, s, [task(w) for w in range(4)]).run(6)
    for r, snaps in seen.items():
        assert len(snaps) == 4
        assert all(snap.equals(snaps[0]) for snap in snaps)
