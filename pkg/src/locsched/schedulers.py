"""Placement strategies.

:class:`Scheduler` holds the machinery every strategy shares: the FIFO
queue, the table of delayed invocations, the metrics cache fed by node
pushes, execution history and the decision log.  Subclasses supply
``decide`` (called for the invocation at the head of the queue) and, if they
ever delay, ``monitor`` (called on monitor ticks and resource releases).

Strategies:

``pds``
    Predictive delay scheduling.  Nodes are split into local (data or
    infrastructure locality) and fallback nodes; an invocation is delayed
    for the best local node only when its predicted time beats the best
    fallback by the factor ``alpha``, and is released to a fallback node as
    soon as waiting any longer would eat into the ``(1 - beta)`` share of its
    SLA.
``bs``
    Round robin, locality-blind.
``nls``
    Immediate placement on the best free local node, otherwise the least
    loaded fallback node.  Never delays.
``rds``
    Data-locality-only delay scheduling with a fixed timeout.
``random``
    Uniform over free nodes; used to collect predictor training samples.
"""

from __future__ import annotations

import heapq
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from locsched.profiling import ExecHistory, MetricsCache, assemble_features, data_local_bytes, push_snapshot

STRATEGIES = ("pds", "bs", "nls", "rds", "random")

# reason tags
NO_LOCAL = "no-local"
BENEFIT_INSUFFICIENT = "benefit-insufficient"
DELAY_FOR_LOCALITY = "delay-for-locality"
SLA_FORCED = "sla-forced-fallback"
TARGET_AVAILABLE = "target-available"
ROUND_ROBIN = "round-robin"
LOCAL_FREE = "local-free"
LOCAL_BUSY = "local-busy"
TIMEOUT = "timeout-fallback"
RANDOM = "random"


class SchedulingError(RuntimeError):
    pass


@dataclass
class SchedulerConfig:
    strategy: str = "pds"
    alpha: float = 0.8
    beta: float = 0.1
    monitor_interval_ms: float = 100.0
    overlap_min: float = 0.3
    w_data: float = 0.5
    w_infra: float = 0.5
    charge_elapsed: bool = True
    charge_wait: bool = True
    rds_timeout_ms: Optional[float] = None
    rds_timeout_factor: float = 1.5
    name: Optional[str] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must be in [0, 1)")
        if self.monitor_interval_ms <= 0:
            raise ValueError("monitor_interval_ms must be > 0")
        if not 0 < self.overlap_min <= 1:
            raise ValueError("overlap_min must be in (0, 1]")
        if self.w_data < 0 or self.w_infra < 0 or not math.isclose(self.w_data + self.w_infra, 1.0):
            raise ValueError("locality weights must be non-negative and sum to 1")
        if self.rds_timeout_ms is not None and self.rds_timeout_ms < 0:
            raise ValueError("rds_timeout_ms must be >= 0")

    @property
    def label(self) -> str:
        return self.name or self.strategy


@dataclass
class NodeClassification:
    local: dict  # node id -> locality score in (0, 1]
    fallback: set

    @property
    def candidates(self) -> set:
        return set(self.local) | self.fallback


@dataclass(frozen=True)
class Decision:
    kind: str  # "immediate" | "delay"
    node: int
    reason: str
    t_local: Optional[float] = None
    t_fallback: Optional[float] = None

    @classmethod
    def immediate(cls, node, reason, t_local=None, t_fallback=None):
        return cls("immediate", node, reason, t_local, t_fallback)

    @classmethod
    def delay(cls, node, reason=DELAY_FOR_LOCALITY, t_local=None, t_fallback=None):
        return cls("delay", node, reason, t_local, t_fallback)


@dataclass
class DelayState:
    inv: object
    target: int
    started: float
    theta: float
    next_tick: float
    fallback: tuple = ()
    local: tuple = ()
    forced: bool = False


@dataclass(frozen=True)
class DecisionRecord:
    time: float
    invocation: str
    strategy: str
    kind: str
    reason: str
    node: int
    t_local: Optional[float]
    t_fallback: Optional[float]
    elapsed: float

    def row(self):
        f = lambda v: "" if v is None else repr(float(v))
        return [repr(self.time), self.invocation, self.strategy, self.kind, self.reason, self.node,
                f(self.t_local), f(self.t_fallback), repr(self.elapsed)]


DECISION_COLUMNS = ["time", "invocation", "strategy", "kind", "reason", "node", "t_local", "t_fallback",
                    "elapsed"]


def classify_nodes(inv, fn, node_ids, metrics: MetricsCache, overlap_min=0.3, w_data=0.5, w_infra=0.5,
                   data_only=False) -> NodeClassification:
    """Split ``node_ids`` into local and fallback nodes for one invocation.

    Local score = ``w_data * (share of predecessor bytes on the node) +
    w_infra * max(warm indicator, cached dependency overlap)``.  A node is
    local when it holds a predecessor output, has a warm container for the
    function, or caches at least ``overlap_min`` of its dependencies.
    """
    if not node_ids:
        raise SchedulingError("empty node set")
    total = inv.predecessor_bytes
    on_node = {}
    for ref in inv.predecessor_outputs:
        on_node[ref.producer] = on_node.get(ref.producer, 0) + ref.size
    local, fallback = {}, set()
    for nid in node_ids:
        has_data = nid in on_node
        if total > 0:
            data_frac = on_node.get(nid, 0) / total
        else:
            data_frac = 1.0 if has_data else 0.0
        if data_only:
            if has_data:
                local[nid] = max(data_frac, 1e-12)
            else:
                fallback.add(nid)
            continue
        snap = metrics.view(nid)
        warm = snap.warm.get(fn.id, 0) > 0
        overlap = snap.dep_overlap(fn)
        infra = max(1.0 if warm else 0.0, overlap)
        if has_data or warm or overlap >= overlap_min:
            local[nid] = max(w_data * data_frac + w_infra * infra, 1e-12)
        else:
            fallback.add(nid)
    return NodeClassification(local, fallback)


def argmin(times: dict, nodes) -> Optional[int]:
    """Node with the smallest value; ties go to the lowest node id."""
    best = None
    for n in sorted(nodes):
        if best is None or times[n] < times[best]:
            best = n
    return best


class Scheduler:
    """Shared queue / delay / metrics machinery.  Subclasses implement the
    placement policy."""

    strategy = "base"

    def __init__(self, config: Optional[SchedulerConfig] = None, predictor=None, recorder=None,
                 history: Optional[ExecHistory] = None, seed: int = 0):
        self.config = config or SchedulerConfig(strategy=self.strategy)
        self.predictor = predictor
        self.recorder = recorder
        self.history = history if history is not None else ExecHistory()
        self.metrics = MetricsCache()
        self.queue = deque()
        self.delayed = {}
        self.decisions = []
        self.pending_features = {}
        self.rng = np.random.default_rng(seed)
        self.engine = None
        self.exec_sum = 0.0
        self.exec_n = 0
        self.core_ns = []
        self._predict_ns = 0
        self.expected_end = {}  # node -> {invocation id: predicted completion time}

    # engine hooks --------------------------------------------------------

    def attach(self, engine):
        self.engine = engine
        self.node_ids = [n.id for n in engine.nodes]
        for node in engine.nodes:
            self.metrics.update(push_snapshot(node, engine.now, dep_ttl=engine.latency.dep_cache_ttl_ms))

    def on_push(self, node, now):
        prev = self.metrics.get(node.id)
        self.metrics.update(push_snapshot(node, now, prev, self.engine.latency.dep_cache_ttl_ms))

    def on_arrival(self, inv, now):
        self.queue.append(inv)
        self.dispatch(now)

    def on_release(self, node_id, inv, breakdown, now):
        actual = breakdown.total
        pending = self.pending_features.pop(inv.id, None)
        if self.recorder is not None and pending is not None and actual > 0:
            feats, predicted = pending
            self.recorder.record(feats, actual, inv.fn, node_id, now, predicted)
        self.history.update(inv.fn, actual)
        self.expected_end.get(node_id, {}).pop(inv.id, None)
        self.exec_sum += actual
        self.exec_n += 1
        self.serve_delayed(now, node_id)
        self.dispatch(now)

    def on_tick(self, inv_id, now):
        state = self.delayed.get(inv_id)
        if state is None or state.next_tick != now:
            return
        self.monitor(state, now, tick=True)

    # helpers -------------------------------------------------------------

    @property
    def mean_exec_ms(self) -> float:
        return self.exec_sum / self.exec_n if self.exec_n else self.history.prior_ms

    def fn(self, fn_id):
        return self.engine.catalog.functions[fn_id]

    def free(self, node_id) -> bool:
        return self.engine.node_by_id[node_id].free_slots > 0

    def free_nodes(self):
        return [n for n in self.node_ids if self.free(n)]

    def features(self, inv, node_id):
        return assemble_features(inv, self.fn(inv.fn), self.metrics.view(node_id), self.history)

    def predict(self, inv, nodes) -> dict:
        nodes = sorted(set(nodes))
        if not nodes:
            return {}
        t0 = time.perf_counter_ns()
        if self.predictor is None:
            raise SchedulingError(f"strategy {self.strategy!r} needs a predictor")
        out = self.predictor.predict(self, inv, nodes)
        self._predict_ns += time.perf_counter_ns() - t0
        return out

    def classify(self, inv, data_only=False) -> NodeClassification:
        c = self.config
        return classify_nodes(inv, self.fn(inv.fn), self.node_ids, self.metrics, c.overlap_min, c.w_data,
                              c.w_infra, data_only)

    def log_decision(self, inv, d: Decision, now):
        self.decisions.append(DecisionRecord(now, inv.id, self.config.label, d.kind, d.reason, d.node,
                                             d.t_local, d.t_fallback, now - inv.arrival))

    def place(self, inv, d: Decision, now):
        self.delayed.pop(inv.id, None)
        self.log_decision(inv, d, now)
        if self.recorder is not None:
            predicted = d.t_local if d.reason == TARGET_AVAILABLE else d.t_fallback
            self.pending_features[inv.id] = (self.features(inv, d.node), predicted)
        est = d.t_local if d.reason == TARGET_AVAILABLE else d.t_fallback
        self.expected_end.setdefault(d.node, {})[inv.id] = now + (self.mean_exec_ms if est is None else est)
        self.engine.place(inv, d.node, now)

    def start_delay(self, inv, d: Decision, now, timeout=None, fallback=(), local=()):
        first_tick = now + (self.config.monitor_interval_ms if timeout is None else timeout)
        state = DelayState(inv, d.node, now, inv.theta, first_tick, tuple(sorted(fallback)),
                           tuple(sorted(local)))
        self.delayed[inv.id] = state
        self.log_decision(inv, d, now)
        return state

    # main loop -----------------------------------------------------------

    def dispatch(self, now):
        while self.queue:
            if not any(self.free(n) for n in self.node_ids):
                return
            inv = self.queue[0]
            self._predict_ns = 0
            t0 = time.perf_counter_ns()
            d = self.decide(inv, now)
            self.core_ns.append(time.perf_counter_ns() - t0 - self._predict_ns)
            if d is None:
                return
            self.queue.popleft()
            if d.kind == "immediate":
                self.place(inv, d, now)
            else:
                state = self.begin_delay(inv, d, now)
                self.monitor(state, now, tick=False, initial=True)

    def serve_delayed(self, now, node_id):
        for state in sorted(self.delayed.values(), key=lambda s: (not s.forced, s.started, s.inv.id)):
            if not self.free_nodes():
                return
            if state.inv.id in self.delayed:
                self.monitor(state, now, tick=False, released=node_id)

    # policy --------------------------------------------------------------

    def decide(self, inv, now) -> Optional[Decision]:
        raise NotImplementedError

    def begin_delay(self, inv, d, now) -> DelayState:
        return self.start_delay(inv, d, now)

    def monitor(self, state, now, tick=False, released=None, initial=False):
        raise NotImplementedError

    def place_forced(self, state, now, reason):
        free = self.free_nodes()
        if not free:
            state.forced = True
            return
        times = self.predict(state.inv, free) if self.predictor is not None else {n: 0.0 for n in free}
        node = argmin(times, free)
        self.place(state.inv, Decision.immediate(node, reason, None, times[node]), now)


class BasicScheduler(Scheduler):
    strategy = "bs"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.cursor = 0

    def decide(self, inv, now):
        n = len(self.node_ids)
        for k in range(n):
            nid = self.node_ids[(self.cursor + k) % n]
            if self.free(nid):
                self.cursor += 1
                return Decision.immediate(nid, ROUND_ROBIN)
        return None


class RandomScheduler(Scheduler):
    strategy = "random"

    def decide(self, inv, now):
        free = self.free_nodes()
        if not free:
            return None
        return Decision.immediate(free[int(self.rng.integers(len(free)))], RANDOM)


class NaiveLocalityScheduler(Scheduler):
    strategy = "nls"

    def decide(self, inv, now):
        cls = self.classify(inv)
        free_local = [n for n in cls.local if self.free(n)]
        if free_local:
            best = max(free_local, key=lambda n: (cls.local[n], -n))
            return Decision.immediate(best, LOCAL_FREE)
        free_fb = [n for n in cls.fallback if self.free(n)]
        if not free_fb:
            return None
        best = min(free_fb, key=lambda n: (len(self.engine.node(n).running), n))
        return Decision.immediate(best, LOCAL_BUSY if cls.local else NO_LOCAL)


class RuleDelayScheduler(Scheduler):
    """Delay for a data-local node up to a fixed timeout, then take the next
    free node in ring order."""

    strategy = "rds"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.cursor = 0

    def timeout_ms(self) -> float:
        c = self.config
        if c.rds_timeout_ms is not None:
            return c.rds_timeout_ms
        return c.rds_timeout_factor * self.mean_exec_ms * math.log(max(2, len(self.node_ids)))

    def next_free(self):
        n = len(self.node_ids)
        for k in range(n):
            nid = self.node_ids[(self.cursor + k) % n]
            if self.free(nid):
                self.cursor += 1
                return nid
        return None

    def decide(self, inv, now):
        if not inv.predecessor_outputs:
            nid = self.next_free()
            return None if nid is None else Decision.immediate(nid, NO_LOCAL)
        cls = self.classify(inv, data_only=True)
        free_local = [n for n in cls.local if self.free(n)]
        if free_local:
            best = max(free_local, key=lambda n: (cls.local[n], -n))
            return Decision.immediate(best, LOCAL_FREE)
        target = max(cls.local, key=lambda n: (cls.local[n], -n))
        return Decision.delay(target, DELAY_FOR_LOCALITY)

    def begin_delay(self, inv, d, now):
        cls = self.classify(inv, data_only=True)
        return self.start_delay(inv, d, now, timeout=self.timeout_ms(), local=cls.local)

    def monitor(self, state, now, tick=False, released=None, initial=False):
        if state.forced:
            nid = self.next_free()
            if nid is not None:
                self.place(state.inv, Decision.immediate(nid, TIMEOUT), now)
            return
        free_local = [n for n in state.local if self.free(n)]
        if free_local:
            data = {n: data_local_bytes(state.inv, n) for n in free_local}
            best = max(free_local, key=lambda n: (data[n], -n))
            self.place(state.inv, Decision.immediate(best, TARGET_AVAILABLE), now)
            return
        if initial:
            self.engine.schedule_tick(state.inv.id, state.next_tick)
        elif tick:
            state.forced = True
            self.monitor(state, now)


class PredictiveDelayScheduler(Scheduler):
    strategy = "pds"

    def expected_wait(self, node_id, duration, now, exclude=None):
        """Time until a slot on ``node_id`` would reach this invocation,
        given the invocations already running there (at their predicted
        completion) and those already delayed for it, each assumed to take
        ``duration``."""
        node = self.engine.node(node_id)
        ahead = sum(1 for st in self.delayed.values()
                    if st.target == node_id and not st.forced and st.inv.id != exclude)
        if node.free_slots > ahead:
            return 0.0
        slots = [now] * node.free_slots
        slots += sorted(max(e, now) for e in self.expected_end.get(node_id, {}).values())
        slots = slots[:node.cpu_slots] or [now]
        heapq.heapify(slots)
        for _ in range(ahead):
            heapq.heappush(slots, heapq.heappop(slots) + duration)
        return slots[0] - now

    def fallback_pool(self, target):
        """Nodes that can take the invocation right now, i.e. every free
        node other than the locality target."""
        return [n for n in self.node_ids if n != target and self.free(n)]

    def decide(self, inv, now):
        cls = self.classify(inv)
        free = self.free_nodes()
        if not free:
            return None
        if not cls.local:
            times = self.predict(inv, free)
            node = argmin(times, free)
            return Decision.immediate(node, NO_LOCAL, None, times[node])
        local = list(cls.local)
        times = self.predict(inv, set(local) | set(free))
        if self.config.charge_wait:
            waits = {n: times[n] + self.expected_wait(n, times[n], now) for n in local}
        else:
            waits = times
        target = argmin(waits, local)
        t_local = waits[target]
        pool = self.fallback_pool(target)
        t_fb = min((times[n] for n in pool), default=math.inf)
        if t_local >= t_fb * self.config.alpha:
            # not worth waiting: fastest node that can start now, target included
            now_pool = pool + [target] if self.free(target) else pool
            node = argmin(times, now_pool)
            return Decision.immediate(node, BENEFIT_INSUFFICIENT, t_local, times[node])
        self._pending_cls = cls
        return Decision.delay(target, DELAY_FOR_LOCALITY, t_local, t_fb)

    def begin_delay(self, inv, d, now):
        cls = getattr(self, "_pending_cls", None) or self.classify(inv)
        self._pending_cls = None
        return self.start_delay(inv, d, now, fallback=cls.fallback, local=cls.local)

    def monitor(self, state, now, tick=False, released=None, initial=False):
        inv = state.inv
        if state.forced:
            self.place_forced(state, now, SLA_FORCED)
            return
        if state.target in self.engine.node_by_id and self.free(state.target):
            t = self.predict(inv, [state.target])[state.target]
            self.place(inv, Decision.immediate(state.target, TARGET_AVAILABLE, t, None), now)
            return
        pool = self.fallback_pool(state.target)
        if pool:
            times = self.predict(inv, pool)
            if self.violation(state, times, pool, now):
                node = argmin(times, pool)
                if self.sla_lost(state, times[node], now) and self.target_sooner(state, times[node], now):
                    # moving cannot rescue the SLA any more; keep the faster option
                    pass
                else:
                    self.place(inv, Decision.immediate(node, SLA_FORCED, None, times[node]), now)
                    return
        elif self.budget_left(state, now) <= 0:
            # nowhere to go yet; take the first node that frees up
            state.forced = True
            return
        if tick or initial:
            state.next_tick = now + self.config.monitor_interval_ms
            self.engine.schedule_tick(inv.id, state.next_tick)

    def sla_lost(self, state, t_best, now):
        elapsed = now - state.inv.arrival if self.config.charge_elapsed else 0.0
        return elapsed + t_best > state.theta

    def target_sooner(self, state, t_best, now):
        if not self.config.charge_wait:
            return False
        t = self.predict(state.inv, [state.target])[state.target]
        return t + self.expected_wait(state.target, t, now, exclude=state.inv.id) < t_best

    def budget_left(self, state, now):
        budget = state.theta * (1.0 - self.config.beta)
        if self.config.charge_elapsed:
            budget -= now - state.inv.arrival
        return budget

    def violation(self, state, times, pool, now):
        """True when no node in ``pool`` can finish inside the remaining
        safe budget."""
        left = self.budget_left(state, now)
        return all(left - times[n] <= 0 for n in pool)


SCHEDULERS = {
    "pds": PredictiveDelayScheduler,
    "bs": BasicScheduler,
    "nls": NaiveLocalityScheduler,
    "rds": RuleDelayScheduler,
    "random": RandomScheduler,
}


def make_scheduler(config: SchedulerConfig, **kw) -> Scheduler:
    return SCHEDULERS[config.strategy](config, **kw)


class ForestPredictor:
    """Predicts from the scheduler's cached (possibly stale) node view."""

    def __init__(self, forest):
        self.forest = forest

    def predict(self, sched, inv, nodes):
        X = np.stack([sched.features(inv, n) for n in nodes])
        y = self.forest.predict_many(X)
        return {n: float(v) for n, v in zip(nodes, y)}

    def observe(self, sample, now):
        return self.forest.observe(sample, now)


class OraclePredictor:
    """Answers with the simulator's ground-truth latency."""

    def predict(self, sched, inv, nodes):
        return {n: sched.engine.latency_of(inv, n).total for n in nodes}

    def observe(self, sample, now):
        return None


@dataclass
class ConstantPredictor:
    value: float = 1000.0
    per_node: dict = field(default_factory=dict)

    def predict(self, sched, inv, nodes):
        return {n: self.per_node.get(n, self.value) for n in nodes}

    def observe(self, sample, now):
        return None
