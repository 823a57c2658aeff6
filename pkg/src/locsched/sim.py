"""Deterministic discrete-event model of a serverless cluster.

The engine owns nodes, the data catalog and the event queue.  It knows
nothing about placement policy: a scheduler object is attached and called
back on arrivals, resource releases and monitor ticks, and answers by
calling :meth:`Engine.place`.
"""

from __future__ import annotations

import heapq
import json
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from locsched.model import Catalog, DataRef, Invocation, SlaOutcome

# tie-break order for events sharing a timestamp
KIND_RANK = {
    "container_expiry": 0,
    "complete": 1,
    "metrics_push": 2,
    "arrival": 3,
    "monitor_tick": 4,
    "start": 5,
}


class SimError(RuntimeError):
    pass


class NoFreeSlot(SimError):
    pass


class UnknownData(SimError):
    pass


@dataclass
class LatencyConfig:
    cold_start_ms: float = 500.0
    zygote_fork_ms: float = 80.0
    per_dep_install_ms: float = 150.0
    warm_ttl_ms: float = 60_000.0
    kappa: float = 0.5
    rho: float = 0.8
    warm_pool_cap: Optional[int] = None
    dep_cache_ttl_ms: Optional[float] = None
    network_sharing: bool = True


@dataclass
class LatencyBreakdown:
    transfer: float
    init: float
    deps: float
    compute: float

    @property
    def total(self) -> float:
        return self.transfer + self.init + self.deps + self.compute


@dataclass
class Running:
    inv: Invocation
    start: float
    transfer_end: float
    remote_bytes: int
    breakdown: LatencyBreakdown
    warm: bool


@dataclass
class NodeState:
    id: int
    cpu_slots: int = 4
    bandwidth: float = 1e9  # bits/s
    local_bandwidth: float = 2e9  # bytes/s
    zygotes: int = 0
    running: dict = field(default_factory=dict)
    warm_pool: dict = field(default_factory=dict)  # fn -> sorted expiry times
    dep_cache: dict = field(default_factory=dict)  # package -> insertion time
    local_bytes_read: int = 0
    remote_bytes_read: int = 0
    dep_version: int = 0  # bumped whenever dep_cache membership changes
    pinned_deps: frozenset = frozenset()  # pre-installed, never evicted

    @property
    def free_slots(self) -> int:
        return self.cpu_slots - len(self.running)

    def purge(self, now, dep_ttl=None):
        for fn in list(self.warm_pool):
            pool = [t for t in self.warm_pool[fn] if t > now]
            if pool:
                self.warm_pool[fn] = pool
            else:
                del self.warm_pool[fn]
        if dep_ttl is not None:
            stale = [p for p, t in self.dep_cache.items() if t + dep_ttl <= now]
            for pkg in stale:
                del self.dep_cache[pkg]
            if stale:
                self.dep_version += 1

    def take_warm(self, fn, now) -> bool:
        """Consume the warm container closest to expiry, if any."""
        pool = [t for t in self.warm_pool.get(fn, ()) if t > now]
        if not pool:
            self.warm_pool.pop(fn, None)
            return False
        pool.pop(0)
        if pool:
            self.warm_pool[fn] = pool
        else:
            del self.warm_pool[fn]
        return True

    def warm_count(self, fn, now) -> int:
        return sum(1 for t in self.warm_pool.get(fn, ()) if t > now)

    def cached_deps(self, now, dep_ttl=None) -> set:
        if dep_ttl is None:
            cached = set(self.dep_cache)
        else:
            cached = {p for p, t in self.dep_cache.items() if t + dep_ttl > now}
        return cached | self.pinned_deps if self.pinned_deps else cached

    def active_transfers(self, now) -> int:
        return sum(1 for r in self.running.values() if r.remote_bytes > 0 and r.transfer_end > now)

    def pending_transfer_bytes(self, now) -> float:
        """Remote bytes still in flight, assuming each transfer progresses
        linearly over its window."""
        total = 0.0
        for r in self.running.values():
            if r.remote_bytes > 0 and r.transfer_end > now:
                span = r.transfer_end - r.start
                total += r.remote_bytes * (r.transfer_end - now) / span if span > 0 else 0.0
        return total


class DataCatalog:
    def __init__(self):
        self.entries = {}

    def register(self, data_id, node, size):
        self.entries[data_id] = (node, size)

    def resolve(self, data_id):
        try:
            return self.entries[data_id]
        except KeyError:
            raise UnknownData(f"unresolved data id {data_id!r}") from None

    def __contains__(self, data_id):
        return data_id in self.entries

    def __len__(self):
        return len(self.entries)


@dataclass(order=True)
class Event:
    time: float
    rank: int
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


def ground_truth_latency(inv: Invocation, node: NodeState, catalog: DataCatalog, fn, compute_ms: float,
                         cfg: LatencyConfig, now: float = 0.0) -> LatencyBreakdown:
    """Execution latency of ``inv`` if started on ``node`` at ``now``.

    ``compute_ms`` is the invocation's pre-drawn base compute sample, so the
    result is a pure function of its arguments.
    """
    remote = 0
    local = 0
    for ref in inv.predecessor_outputs:
        producer, size = catalog.resolve(ref.data_id)
        if producer == node.id:
            local += size
        else:
            remote += size
    bw = node.bandwidth
    if cfg.network_sharing and remote > 0:
        bw = bw / (1 + node.active_transfers(now))
    transfer = remote * 8.0 / bw * 1000.0 + local / node.local_bandwidth * 1000.0

    warm = node.warm_count(fn.id, now) > 0
    if warm:
        init = 0.0
        deps = 0.0
    else:
        init = cfg.zygote_fork_ms if node.zygotes > 0 else cfg.cold_start_ms
        missing = fn.deps - node.cached_deps(now, cfg.dep_cache_ttl_ms)
        deps = len(missing) * cfg.per_dep_install_ms

    excess = max(0.0, len(node.running) - node.cpu_slots * cfg.rho)
    contention = 1.0 + cfg.kappa * excess / node.cpu_slots
    return LatencyBreakdown(transfer, init, deps, compute_ms * contention)


class _WorkflowRun:
    def __init__(self, wf, instance):
        self.wf = wf
        self.instance = instance
        self.pending = {s.name: s.fan_out for s in wf.stages}
        self.done = {s.name: [] for s in wf.stages}  # (invocation, node, output bytes)
        self.released = set()
        self.start = None
        self.end = None


class Engine:
    """Single-threaded event loop.  Equal (config, seed, trace, scheduler)
    give identical event logs."""

    def __init__(self, nodes, catalog: Catalog, scheduler=None, seed: int = 0,
                 latency: Optional[LatencyConfig] = None, push_interval_ms: float = 50.0,
                 log_pushes: bool = False):
        self.nodes = list(nodes)
        self.node_by_id = {n.id: n for n in self.nodes}
        self.catalog = catalog
        self.latency = latency or LatencyConfig()
        self.data = DataCatalog()
        self.seed = seed
        self.push_interval_ms = push_interval_ms
        self.log_pushes = log_pushes
        self.now = 0.0
        self.queue = []
        self.seq = 0
        self.log = []
        self.outcomes = []
        self.invocations = {}
        self.compute_draw = {}
        self.breakdowns = {}
        self.placed_at = {}
        self.workflows = {}
        self.arrived = 0
        self.completed = 0
        self.max_occupancy = 0
        self._future_arrivals = 0
        self._pushing = False
        self.scheduler = None
        self.listeners = []
        if scheduler is not None:
            self.attach(scheduler)

    def invocation_rng(self, inv_id):
        """Per-invocation stream, so a given invocation draws the same compute
        time under every strategy."""
        return np.random.default_rng([self.seed, zlib.crc32(inv_id.encode())])

    def attach(self, scheduler):
        self.scheduler = scheduler
        scheduler.attach(self)

    # event queue ---------------------------------------------------------

    def push(self, time, kind, **payload):
        ev = Event(float(time), KIND_RANK[kind], self.seq, kind, payload)
        self.seq += 1
        # plain tuples compare much faster than dataclass instances
        heapq.heappush(self.queue, (ev.time, ev.rank, ev.seq, ev))
        return ev

    def _record(self, kind, **payload):
        self.log.append((self.now, kind, payload))

    # workload ------------------------------------------------------------

    def submit(self, inv: Invocation):
        """Queue a standalone invocation (or a workflow root) for arrival."""
        self._future_arrivals += 1
        self.push(inv.arrival, "arrival", inv=inv)
        self._ensure_pushes()

    def load_trace(self, events):
        for ev in events:
            inv = ev.invocation
            if ev.workflow is not None:
                run = self.workflows.get(ev.instance)
                if run is None:
                    run = _WorkflowRun(self.catalog.workflows[ev.workflow], ev.instance)
                    self.workflows[ev.instance] = run
                run.released.add(inv.stage)
            self.submit(inv)

    def _ensure_pushes(self):
        if self._pushing or self.push_interval_ms is None:
            return
        self._pushing = True
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            self.push(self.now + self.push_interval_ms * i / n, "metrics_push", node=node.id)

    @property
    def outstanding(self) -> int:
        return self._future_arrivals + self.arrived - self.completed

    # simulation state ----------------------------------------------------

    def fn(self, fn_id):
        return self.catalog.functions[fn_id]

    def node(self, node_id) -> NodeState:
        try:
            return self.node_by_id[node_id]
        except KeyError:
            raise SimError(f"unknown node {node_id!r}") from None

    def free_nodes(self):
        return [n.id for n in self.nodes if n.free_slots > 0]

    def latency_of(self, inv: Invocation, node_id, now=None) -> LatencyBreakdown:
        """Ground-truth latency of ``inv`` on ``node_id`` without changing any
        state; this is what an oracle predictor sees."""
        node = self.node(node_id)
        return ground_truth_latency(inv, node, self.data, self.fn(inv.fn), self.compute_draw[inv.id],
                                    self.latency, self.now if now is None else now)

    def place(self, inv: Invocation, node_id, now=None):
        now = self.now if now is None else now
        node = self.node(node_id)
        if node.free_slots <= 0:
            raise NoFreeSlot(f"no free slot on node {node_id}")
        if inv.id not in self.invocations or inv.id in self.placed_at:
            raise SimError(f"invocation {inv.id!r} is not waiting")
        bd = self.latency_of(inv, node_id, now)
        warm = node.take_warm(inv.fn, now)
        remote = local = 0
        for ref in inv.predecessor_outputs:
            producer, size = self.data.resolve(ref.data_id)
            if producer == node.id:
                local += size
            else:
                remote += size
        node.local_bytes_read += local
        node.remote_bytes_read += remote
        node.running[inv.id] = Running(inv, now, now + bd.transfer, remote, bd, warm)
        self.max_occupancy = max(self.max_occupancy, len(node.running) / node.cpu_slots)
        self.placed_at[inv.id] = (now, node_id)
        self.breakdowns[inv.id] = bd
        self._record("start", inv=inv.id, node=node_id, queued=now - inv.arrival,
                     transfer=bd.transfer, init=bd.init, deps=bd.deps, compute=bd.compute,
                     occupancy=len(node.running), slots=node.cpu_slots)
        return self.push(now + bd.total, "complete", inv=inv.id, node=node_id)

    def schedule_tick(self, inv_id, time):
        return self.push(time, "monitor_tick", inv=inv_id)

    # event handlers ------------------------------------------------------

    def _on_arrival(self, ev):
        inv = ev.payload["inv"]
        self._future_arrivals -= 1
        self.arrived += 1
        self.invocations[inv.id] = inv
        self.compute_draw[inv.id] = self.fn(inv.fn).base_compute.sample(self.invocation_rng(inv.id))
        if inv.workflow is not None:
            run = self.workflows.get(inv.workflow)
            if run is not None and run.start is None:
                run.start = self.now
        self._record("arrival", inv=inv.id, fn=inv.fn, input_size=inv.input_size)
        if self.scheduler is not None:
            self.scheduler.on_arrival(inv, self.now)

    def on_complete(self, ev):
        inv_id = ev.payload["inv"]
        node = self.node(ev.payload["node"])
        run = node.running.pop(inv_id, None)
        if run is None:
            raise SimError(f"unknown invocation {inv_id!r}")
        inv = run.inv
        fn = self.fn(inv.fn)
        now = self.now
        self.completed += 1

        outputs = self._register_outputs(inv, node.id)
        expiry = now + self.latency.warm_ttl_ms
        pool = node.warm_pool.setdefault(fn.id, [])
        pool.append(expiry)
        pool.sort()
        cap = self.latency.warm_pool_cap
        if cap is not None:
            while sum(len(p) for p in node.warm_pool.values()) > cap:
                victim = min(node.warm_pool, key=lambda f: (node.warm_pool[f][0], f))
                node.warm_pool[victim].pop(0)
                if not node.warm_pool[victim]:
                    del node.warm_pool[victim]
        self.push(expiry, "container_expiry", node=node.id, fn=fn.id)
        if not fn.deps <= node.dep_cache.keys():
            node.dep_version += 1
        for pkg in sorted(fn.deps):
            node.dep_cache[pkg] = now

        queued = run.start - inv.arrival
        outcome = SlaOutcome.evaluate(inv, now, node=node.id, queued=queued, exec_ms=run.breakdown.total)
        self.outcomes.append(outcome)
        self._record("complete", inv=inv.id, node=node.id, e2e=outcome.end_to_end, outputs=outputs)

        for listener in self.listeners:
            listener(inv, node.id, run.breakdown, now)
        released = self._advance_workflow(inv, node.id)
        if self.scheduler is not None:
            self.scheduler.on_release(node.id, inv, run.breakdown, now)
        for new in released:
            self.submit(new)

    def _on_expiry(self, ev):
        node = self.node(ev.payload["node"])
        node.purge(self.now, self.latency.dep_cache_ttl_ms)
        self._record("container_expiry", node=node.id, fn=ev.payload["fn"])

    def _on_push(self, ev):
        node = self.node(ev.payload["node"])
        if self.scheduler is not None:
            self.scheduler.on_push(node, self.now)
        if self.log_pushes:
            self._record("metrics_push", node=node.id)
        if self.outstanding > 0:
            self.push(self.now + self.push_interval_ms, "metrics_push", node=node.id)
        else:
            self._pushing = False

    def _on_tick(self, ev):
        self._record("monitor_tick", inv=ev.payload["inv"])
        if self.scheduler is not None:
            self.scheduler.on_tick(ev.payload["inv"], self.now)

    # workflows -----------------------------------------------------------

    def _consumers(self, inv):
        if inv.workflow is None or inv.workflow not in self.workflows:
            return None
        run = self.workflows[inv.workflow]
        return run.wf.successors(inv.stage), run.wf.stage(inv.stage)

    def _register_outputs(self, inv, node_id):
        out = inv.input_size
        info = self._consumers(inv)
        if info is None or not info[0]:
            stage_ratio = info[1].output_ratio if info else 1.0
            size = int(out * stage_ratio)
            self.data.register(f"{inv.id}/out", node_id, size)
            return [f"{inv.id}/out"]
        succs, stage = info
        size = int(out * stage.output_ratio)
        ids = []
        for s in succs:
            if s.fan_out == stage.fan_out:
                did = f"{inv.id}/to/{s.name}"
                self.data.register(did, node_id, size)
                ids.append(did)
            else:
                for i in range(s.fan_out):
                    did = f"{inv.id}/to/{s.name}/{i}"
                    self.data.register(did, node_id, size // s.fan_out)
                    ids.append(did)
        return ids

    def _advance_workflow(self, inv, node_id):
        if inv.workflow is None or inv.workflow not in self.workflows:
            return []
        run = self.workflows[inv.workflow]
        run.done[inv.stage].append(inv)
        run.pending[inv.stage] -= 1
        if all(v == 0 for v in run.pending.values()):
            run.end = self.now
        ready = []
        for s in run.wf.successors(inv.stage):
            if s.name in run.released:
                continue
            if any(run.pending[p] > 0 for p in s.predecessors):
                continue
            run.released.add(s.name)
            fn = self.fn(s.function)
            for i in range(s.fan_out):
                refs = []
                for pname in s.predecessors:
                    pstage = run.wf.stage(pname)
                    for p_inv in sorted(run.done[pname], key=lambda v: v.index):
                        if pstage.fan_out == s.fan_out:
                            if p_inv.index != i:
                                continue
                            did = f"{p_inv.id}/to/{s.name}"
                        else:
                            did = f"{p_inv.id}/to/{s.name}/{i}"
                        producer, size = self.data.resolve(did)
                        refs.append(DataRef(did, size, producer))
                ready.append(Invocation.create(
                    f"{run.instance}:{s.name}:{i}", fn, self.now, sum(r.size for r in refs), refs,
                    workflow=run.instance, stage=s.name, index=i,
                ))
        return ready

    def workflow_makespans(self):
        return {k: r.end - r.start for k, r in sorted(self.workflows.items()) if r.end is not None}

    # main loop -----------------------------------------------------------

    def step(self):
        ev = heapq.heappop(self.queue)[3]
        if ev.time < self.now:
            raise SimError("event queue went backwards")
        self.now = ev.time
        kind = ev.kind
        if kind == "arrival":
            self._on_arrival(ev)
        elif kind == "complete":
            self.on_complete(ev)
        elif kind == "container_expiry":
            self._on_expiry(ev)
        elif kind == "metrics_push":
            self._on_push(ev)
        elif kind == "monitor_tick":
            self._on_tick(ev)
        return ev

    def run_until(self, t_end):
        while self.queue and self.queue[0][0] <= t_end:
            self.step()
        return self.outcomes, self.log

    def run(self, max_events: Optional[int] = None):
        """Run until every submitted invocation has completed."""
        n = 0
        while self.queue and self.outstanding > 0:
            self.step()
            n += 1
            if max_events is not None and n >= max_events:
                raise SimError("event budget exhausted")
        if self.outstanding > 0:
            raise SimError(f"{self.outstanding} invocations never completed")
        return self.outcomes, self.log

    # export / audit ------------------------------------------------------

    def log_lines(self):
        for t, kind, payload in self.log:
            yield json.dumps({"t": t, "kind": kind, **payload}, sort_keys=True)

    def write_log(self, path):
        with open(path, "w") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")


def audit_log(log, slots: dict):
    """Replay an event log; returns (arrivals, completions, violations) where
    violations lists slot-occupancy breaches and duplicate completions."""
    running = {}
    arrivals = completions = 0
    seen = set()
    problems = []
    for t, kind, p in log:
        if kind == "arrival":
            arrivals += 1
        elif kind == "start":
            running[p["node"]] = running.get(p["node"], 0) + 1
            if running[p["node"]] > slots[p["node"]]:
                problems.append(f"t={t}: node {p['node']} over capacity")
        elif kind == "complete":
            completions += 1
            if p["inv"] in seen:
                problems.append(f"t={t}: duplicate completion {p['inv']}")
            seen.add(p["inv"])
            running[p["node"]] -= 1
    return arrivals, completions, problems


def make_nodes(count, cpu_slots=4, bandwidth=1e9, local_bandwidth=2e9, zygotes=0, start_id=0):
    return [NodeState(start_id + i, cpu_slots, bandwidth, local_bandwidth, zygotes) for i in range(count)]
