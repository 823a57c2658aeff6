"""Node and function profiling.

Worker nodes push a :class:`NodeSnapshot` every ``push_interval_ms``; the
scheduler only ever reads the latest pushed snapshot, so everything it sees
is up to one push interval stale.  Feature vectors are the fixed-order
concatenation of system, container, network and function fields.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SYSTEM_FIELDS = ("cpu_util", "load_avg", "mem_util", "disk_io")
CONTAINER_FIELDS = ("warm_count", "zygote_count", "cached_dep_overlap")
NETWORK_FIELDS = ("bandwidth_util", "packet_rate", "rtt_ms")
FUNCTION_FIELDS = ("input_size", "dep_count", "hist_exec_ms", "data_local_bytes")
FEATURE_NAMES = SYSTEM_FIELDS + CONTAINER_FIELDS + NETWORK_FIELDS + FUNCTION_FIELDS
N_FEATURES = len(FEATURE_NAMES)

LOAD_TAU_MS = 1000.0
BASE_RTT_MS = 0.2
PACKET_BYTES = 1500


@dataclass(slots=True)
class NodeSnapshot:
    """One pushed metrics record.  Treated as immutable once published."""

    node: int
    as_of: float
    cpu_util: float
    load_avg: float
    mem_util: float
    disk_io: float  # MB/s of local reads since the previous push
    bandwidth_util: float
    packet_rate: float  # packets/s received since the previous push
    rtt_ms: float
    zygotes: int
    warm: dict = field(default_factory=dict)
    deps: frozenset = frozenset()
    # raw counters carried forward for the next push's rate fields
    local_bytes: int = 0
    remote_bytes: int = 0
    dep_version: int = -1

    def staleness(self, now) -> float:
        return now - self.as_of

    def dep_overlap(self, fn) -> float:
        return len(fn.deps & self.deps) / max(1, fn.dep_count)

    def metrics_for(self, fn) -> "NodeMetrics":
        overlap = self.dep_overlap(fn)
        return NodeMetrics(
            s=(self.cpu_util, self.load_avg, self.mem_util, self.disk_io),
            c=(float(self.warm.get(fn.id, 0)), float(self.zygotes), overlap),
            n=(self.bandwidth_util, self.packet_rate, self.rtt_ms),
            as_of=self.as_of,
        )


@dataclass(frozen=True)
class NodeMetrics:
    s: tuple
    c: tuple
    n: tuple
    as_of: float

    @property
    def warm_count(self):
        return self.c[0]

    @property
    def cached_dep_overlap(self):
        return self.c[2]


def push_snapshot(node, now, previous: Optional[NodeSnapshot] = None, dep_ttl=None) -> NodeSnapshot:
    """Sample a node's state as its agent would push it at ``now``."""
    running = len(node.running)
    cpu = min(1.0, running / node.cpu_slots)
    if previous is None:
        load = float(running)
        dt = 0.0
        local_prev = remote_prev = 0
    else:
        dt = now - previous.as_of
        decay = math.exp(-dt / LOAD_TAU_MS)
        load = previous.load_avg * decay + running * (1.0 - decay)
        local_prev, remote_prev = previous.local_bytes, previous.remote_bytes
    warm = {}
    for fn, pool in node.warm_pool.items():
        k = len(pool) - bisect_right(pool, now)
        if k:
            warm[fn] = k
    warm_total = sum(warm.values())
    mem = min(1.0, (running + 0.25 * warm_total) / (2.0 * node.cpu_slots))
    if dt > 0:
        disk_io = (node.local_bytes_read - local_prev) / 1e6 / (dt / 1000.0)
        packets = (node.remote_bytes_read - remote_prev) / PACKET_BYTES / (dt / 1000.0)
    else:
        disk_io = packets = 0.0
    if running:
        bw_util = min(1.0, node.pending_transfer_bytes(now) * 8.0 / node.bandwidth)
        rtt = BASE_RTT_MS * (1 + node.active_transfers(now))
    else:
        bw_util, rtt = 0.0, BASE_RTT_MS
    if dep_ttl is None and previous is not None and previous.dep_version == node.dep_version:
        deps = previous.deps
    else:
        deps = frozenset(node.cached_deps(now, dep_ttl))
    return NodeSnapshot(
        node=node.id, as_of=now, cpu_util=cpu, load_avg=load, mem_util=mem, disk_io=disk_io,
        bandwidth_util=bw_util, packet_rate=packets, rtt_ms=rtt, zygotes=node.zygotes,
        warm=warm, deps=deps, local_bytes=node.local_bytes_read, remote_bytes=node.remote_bytes_read,
        dep_version=node.dep_version,
    )


class MetricsCache:
    """Scheduler-side latest-wins store of pushed snapshots.  A push replaces
    the reference in one assignment, so readers never see a partial
    update."""

    def __init__(self):
        self._views = {}

    def update(self, snap: NodeSnapshot):
        cur = self._views.get(snap.node)
        if cur is None or snap.as_of >= cur.as_of:
            self._views[snap.node] = snap

    def view(self, node_id) -> NodeSnapshot:
        return self._views[node_id]

    def get(self, node_id) -> Optional[NodeSnapshot]:
        return self._views.get(node_id)

    def __contains__(self, node_id):
        return node_id in self._views


class ExecHistory:
    """Exponentially weighted mean of observed execution times per function."""

    def __init__(self, alpha=0.3, prior_ms=1000.0):
        self.alpha = alpha
        self.prior_ms = prior_ms
        self.means = {}
        self.counts = {}

    def get(self, fn_id) -> float:
        return self.means.get(fn_id, self.prior_ms)

    def update(self, fn_id, actual):
        if fn_id in self.means:
            self.means[fn_id] = (1 - self.alpha) * self.means[fn_id] + self.alpha * actual
        else:
            self.means[fn_id] = float(actual)
        self.counts[fn_id] = self.counts.get(fn_id, 0) + 1

    def copy(self) -> "ExecHistory":
        h = ExecHistory(self.alpha, self.prior_ms)
        h.means = dict(self.means)
        h.counts = dict(self.counts)
        return h


def data_local_bytes(inv, node_id) -> int:
    return sum(ref.size for ref in inv.predecessor_outputs if ref.producer == node_id)


def assemble_features(inv, fn, snapshot: NodeSnapshot, history: ExecHistory) -> np.ndarray:
    m = snapshot.metrics_for(fn)
    d = (float(inv.input_size), float(fn.dep_count), history.get(fn.id),
         float(data_local_bytes(inv, snapshot.node)))
    return np.array(m.s + m.c + m.n + d, dtype=np.float64)


@dataclass
class ObservedSample:
    features: np.ndarray
    actual: float
    fn: str
    node: int
    t: float
    predicted: Optional[float] = None

    def __post_init__(self):
        if not self.actual > 0:
            raise ValueError("observed execution time must be > 0")

    def row(self):
        pred = "" if self.predicted is None else repr(float(self.predicted))
        return [repr(float(v)) for v in self.features] + [repr(float(self.actual)), self.fn, self.node,
                                                         repr(float(self.t)), pred]


SAMPLE_COLUMNS = list(FEATURE_NAMES) + ["actual", "fn", "node", "t", "predicted"]


class SampleRecorder:
    """Collects observations, feeds them to a predictor and keeps the run's
    sample log."""

    def __init__(self, predictor=None):
        self.samples = []
        self.predictor = predictor
        self.updates = []

    def record(self, features, actual, fn, node, t, predicted=None) -> ObservedSample:
        sample = ObservedSample(np.asarray(features, dtype=np.float64), float(actual), fn, node, t, predicted)
        self.samples.append(sample)
        if self.predictor is not None:
            report = self.predictor.observe(sample, t)
            if report is not None:
                self.updates.append(report)
        return sample

    def write_csv(self, path):
        write_samples(path, self.samples)


def write_samples(path, samples):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow(s.row())


def read_samples(path):
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != SAMPLE_COLUMNS:
            raise ValueError("unexpected sample log header")
        for row in r:
            feats = np.array([float(v) for v in row[:N_FEATURES]])
            actual, fn, node, t, pred = row[N_FEATURES:]
            out.append(ObservedSample(feats, float(actual), fn, int(node), float(t),
                                      float(pred) if pred else None))
    return out


def record_observation(recorder: SampleRecorder, features, actual, meta) -> ObservedSample:
    return recorder.record(features, actual, meta["fn"], meta["node"], meta["t"], meta.get("predicted"))
