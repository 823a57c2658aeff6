"""Synthetic invocation streams.

Only workflow roots are emitted; dependent stages are released by the engine
when their predecessors finish, so stage-to-stage timing follows the actual
schedule rather than the trace.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from locsched.model import Catalog, ComputeModel, DataRef, FunctionSpec, Invocation, SizeModel, Stage, WorkflowSpec

MB = 1_000_000


@dataclass(frozen=True)
class WorkloadConfig:
    duration_ms: float = 300_000.0
    process: str = "poisson"  # poisson | empirical
    rate_rps: float = 1.0
    popularity_exponent: float = 1.0
    apps: tuple = ("video",)
    concurrency_level: int = 1
    seed: int = 0
    # empirical: this many root executions per app, Poisson spaced at rate_rps
    executions_per_app: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "apps", tuple(self.apps))
        if self.process not in ("poisson", "empirical"):
            raise ValueError(f"unknown arrival process {self.process!r}")
        if not 0.1 <= self.rate_rps <= 50:
            raise ValueError("rate_rps must be within [0.1, 50]")
        if self.concurrency_level < 1:
            raise ValueError("concurrency_level must be >= 1")
        if self.duration_ms <= 0:
            raise ValueError("duration_ms must be > 0")
        if self.popularity_exponent < 0:
            raise ValueError("popularity_exponent must be >= 0")
        if not self.apps:
            raise ValueError("at least one app is required")
        if self.process == "empirical" and (self.executions_per_app or 0) < 1:
            raise ValueError("empirical process needs executions_per_app >= 1")


@dataclass(frozen=True)
class TraceEvent:
    arrival: float
    workflow: str
    instance: str
    stage: str
    invocation: Invocation


def zipf_weights(n, exponent):
    """Popularity mass of rank k (1-based) proportional to k^-exponent."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(exponent)
    return w / w.sum()


def root_events(catalog: Catalog, wf_id, instance, arrival, rng):
    wf = catalog.workflows[wf_id]
    out = []
    for st in wf.stages:
        if st.predecessors:
            continue
        fn = catalog.functions[st.function]
        for i in range(st.fan_out):
            inv = Invocation.create(f"{instance}:{st.name}:{i}", fn, arrival, fn.input_size.sample(rng),
                                    workflow=instance, stage=st.name, index=i)
            out.append(TraceEvent(arrival, wf_id, instance, st.name, inv))
    return out


def _arrivals(cfg: WorkloadConfig, rng):
    """Root arrival times (ms) and app indices for one stream."""
    rate_per_ms = cfg.rate_rps / 1000.0
    if cfg.process == "empirical":
        n = cfg.executions_per_app * len(cfg.apps)
        gaps = rng.exponential(1.0 / rate_per_ms, n)
        apps = np.repeat(np.arange(len(cfg.apps)), cfg.executions_per_app)
        rng.shuffle(apps)
        return np.cumsum(gaps), apps
    n = rng.poisson(rate_per_ms * cfg.duration_ms)
    times = np.sort(rng.uniform(0.0, cfg.duration_ms, n))
    apps = rng.choice(len(cfg.apps), size=n, p=zipf_weights(len(cfg.apps), cfg.popularity_exponent))
    return times, apps


def generate(cfg: WorkloadConfig, catalog: Catalog):
    """Ordered root events for ``cfg``.  Each concurrency level is an
    independent stream at ``rate_rps``; streams are merged by arrival."""
    for app in cfg.apps:
        if app not in catalog.workflows:
            raise ValueError(f"unknown app {app!r}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.concurrency_level + 1)
    roots = []
    for s in range(cfg.concurrency_level):
        times, apps = _arrivals(cfg, np.random.default_rng(seeds[s]))
        roots.extend((float(t), s, int(a)) for t, a in zip(times, apps))
    roots.sort()
    size_rng = np.random.default_rng(seeds[-1])
    events = []
    for k, (t, _, a) in enumerate(roots):
        app = cfg.apps[a]
        events.extend(root_events(catalog, app, f"{app}-{k:05d}", t, size_rng))
    return events


def trace_line(ev: TraceEvent) -> str:
    inv = ev.invocation
    return json.dumps({
        "arrival": ev.arrival, "workflow": ev.workflow, "instance": ev.instance, "stage": ev.stage,
        "id": inv.id, "fn": inv.fn, "input_size": inv.input_size, "theta": inv.theta, "index": inv.index,
        "inputs": [[r.data_id, r.size, r.producer] for r in inv.predecessor_outputs],
    }, sort_keys=True)


def parse_trace_line(line: str) -> TraceEvent:
    d = json.loads(line)
    inv = Invocation(d["id"], d["fn"], d["arrival"], d["input_size"], d["arrival"] + d["theta"], d["theta"],
                     tuple(DataRef(*r) for r in d["inputs"]), d["instance"], d["stage"], d["index"])
    return TraceEvent(d["arrival"], d["workflow"], d["instance"], d["stage"], inv)


def write_trace(path, events):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(trace_line(ev) + "\n")


def read_trace(path):
    with open(path) as fh:
        return [parse_trace_line(line) for line in fh if line.strip()]


# application catalog --------------------------------------------------------

def _pkgs(prefix, n):
    return frozenset(f"{prefix}/pkg{i:02d}" for i in range(n))


def _fn(id, deps, compute_ms, input_mb, theta_ms, cv=0.05, sigma=0.5, stage=None):
    return FunctionSpec(id, deps, ComputeModel(compute_ms, cv), SizeModel(input_mb * MB, sigma), theta_ms, stage)


def default_catalog() -> Catalog:
    """Four applications: video and log move data, doc and ml install many
    packages.  Non-root input sizes come from predecessor outputs, so only
    root size models matter."""
    cat = Catalog()
    video = _pkgs("video", 6)
    for fn in (
        _fn("video-split", set(sorted(video)[:5]), 300, 1000, 45_000, sigma=0.8, stage="split"),
        _fn("video-transcode", set(sorted(video)[1:5]), 1500, 50, 45_000, stage="transcode"),
        _fn("video-merge", set(sorted(video)[2:6]), 400, 50, 45_000, stage="merge"),
        _fn("log-split", set(), 200, 500, 20_000, sigma=0.8, stage="split"),
        _fn("log-analyze", _pkgs("log", 3), 900, 40, 20_000, stage="analyze"),
        _fn("log-merge", set(sorted(_pkgs("log", 3))[:2]), 300, 10, 20_000, stage="merge"),
        _fn("any2md-validate", _pkgs("doc", 2), 150, 2, 3_000, stage="validate"),
        _fn("any2md-process", _pkgs("doc", 34), 800, 2, 5_000, stage="process"),
        _fn("ml-normalize", _pkgs("ml", 4), 200, 5, 3_000, stage="normalize"),
        _fn("ml-process", _pkgs("ml", 17) | _pkgs("ml", 4), 600, 5, 3_000, stage="process"),
    ):
        cat.add_function(fn)
    cat.add_workflow(WorkflowSpec("video", (
        Stage("split", "video-split", 1, (), 1.0),
        Stage("transcode", "video-transcode", 4, ("split",), 0.5),
        Stage("merge", "video-merge", 1, ("transcode",), 1.0),
    )))
    cat.add_workflow(WorkflowSpec("log", (
        Stage("split", "log-split", 1, (), 1.0),
        Stage("analyze", "log-analyze", 4, ("split",), 0.2),
        Stage("merge", "log-merge", 1, ("analyze",), 1.0),
    )))
    cat.add_workflow(WorkflowSpec("doc", (
        Stage("validate", "any2md-validate", 1, (), 1.0),
        Stage("process", "any2md-process", 1, ("validate",), 1.0),
    )))
    cat.add_workflow(WorkflowSpec("ml", (
        Stage("normalize", "ml-normalize", 1, (), 1.0),
        Stage("process", "ml-process", 1, ("normalize",), 0.5),
    )))
    return cat


def scenario_presets() -> dict:
    return {
        "video": WorkloadConfig(duration_ms=1_800_000, rate_rps=0.1, apps=("video",)),
        "log": WorkloadConfig(duration_ms=1_800_000, rate_rps=0.1, apps=("log",)),
        "doc": WorkloadConfig(duration_ms=1_800_000, rate_rps=0.1, apps=("doc",)),
        "ml": WorkloadConfig(duration_ms=1_800_000, rate_rps=0.1, apps=("ml",)),
        "empirical": WorkloadConfig(process="empirical", rate_rps=0.2, apps=("video", "log", "doc", "ml"),
                                    executions_per_app=100),
    }


def with_overrides(cfg: WorkloadConfig, **kw) -> WorkloadConfig:
    return replace(cfg, **kw)


def config_dict(cfg: WorkloadConfig) -> dict:
    d = asdict(cfg)
    d["apps"] = list(cfg.apps)
    return d
