"""Experiment driver: configs, runs, reports and comparisons.

A run replays one generated trace per replication against every configured
strategy, each on a fresh engine with the same seed, and reduces the
per-invocation records into a :class:`Report`.  The report can be rebuilt
bit-for-bit from the persisted CSV records (:func:`report_from_files`).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from locsched.forest import Forest, ForestConfig
from locsched.model import Catalog, ComputeModel, FunctionSpec, SizeModel, Stage, WorkflowError, WorkflowSpec
from locsched.profiling import N_FEATURES, SampleRecorder, read_samples, write_samples
from locsched.schedulers import (DECISION_COLUMNS, ForestPredictor, OraclePredictor, RandomScheduler,
                                 SchedulerConfig, make_scheduler)
from locsched.sim import Engine, LatencyConfig, NodeState, audit_log
from locsched.workload import (WorkloadConfig, default_catalog, generate, read_trace, scenario_presets)

PERCENTILES = (50, 90, 95, 99)
CDF_POINTS = 100
RECOVERY_WINDOW = 5
REPORT_FORMAT = "locsched-report"


class ConfigError(ValueError):
    pass


# configuration --------------------------------------------------------------

@dataclass
class ClusterConfig:
    nodes: int = 10
    cpu_slots: int = 4
    bandwidth_bps: float = 1e9
    local_bandwidth_Bps: float = 2e9
    zygotes: int = 0
    # an extra node with this many slots, never saturated in practice
    spare_node_slots: int = 0
    # pre-install every catalog package on the spare node
    spare_node_provisioned: bool = False
    push_interval_ms: float = 50.0
    latency: LatencyConfig = field(default_factory=LatencyConfig)

    def __post_init__(self):
        if self.nodes < 1:
            raise ConfigError("cluster.nodes must be >= 1")
        if self.cpu_slots < 1:
            raise ConfigError("cluster.cpu_slots must be >= 1")
        if self.bandwidth_bps <= 0 or self.local_bandwidth_Bps <= 0:
            raise ConfigError("bandwidths must be > 0")
        if self.push_interval_ms <= 0:
            raise ConfigError("push_interval_ms must be > 0")

    def build_nodes(self, catalog: Optional[Catalog] = None):
        nodes = [NodeState(i, self.cpu_slots, self.bandwidth_bps, self.local_bandwidth_Bps, self.zygotes)
                 for i in range(self.nodes)]
        if self.spare_node_slots:
            spare = NodeState(self.nodes, self.spare_node_slots, self.bandwidth_bps, self.local_bandwidth_Bps,
                              self.zygotes)
            if self.spare_node_provisioned and catalog is not None:
                spare.pinned_deps = frozenset().union(*(f.deps for f in catalog.functions.values()))
            nodes.append(spare)
        return nodes


@dataclass
class PredictorConfig:
    kind: str = "forest"  # forest | oracle
    warmup_duration_ms: float = 600_000.0
    forest: ForestConfig = field(default_factory=ForestConfig)

    def __post_init__(self):
        if self.kind not in ("forest", "oracle"):
            raise ConfigError(f"unknown predictor kind {self.kind!r}")
        if self.warmup_duration_ms <= 0:
            raise ConfigError("warmup_duration_ms must be > 0")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    replications: int = 5
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    workload: Optional[WorkloadConfig] = field(default_factory=WorkloadConfig)
    trace_path: Optional[str] = None
    strategies: list = field(default_factory=lambda: [SchedulerConfig(strategy=s) for s in
                                                      ("bs", "nls", "rds", "pds")])
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    catalog: Catalog = field(default_factory=default_catalog)

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        labels = [s.label for s in self.strategies]
        if len(set(labels)) != len(labels):
            raise ConfigError("strategy labels must be unique (set 'name' to disambiguate)")
        if self.workload is None and self.trace_path is None:
            raise ConfigError("either workload or trace must be given")

    def with_strategies(self, labels):
        keep = [s for s in self.strategies if s.label in labels or s.strategy in labels]
        if not keep:
            raise ConfigError(f"no strategy matches {labels}")
        out = copy.copy(self)
        out.strategies = keep
        return out


def _build(cls, data, what):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{what}: {e}") from None


def catalog_from_dict(data) -> Catalog:
    cat = Catalog()
    try:
        for f in data.get("functions", []):
            deps = f.get("deps")
            if deps is None:
                deps = [f"{f['id']}/pkg{i:02d}" for i in range(int(f.get("dep_count", 0)))]
            cat.add_function(FunctionSpec(
                f["id"], frozenset(deps),
                ComputeModel(float(f.get("compute_ms", 1000.0)), float(f.get("compute_cv", 0.05))),
                SizeModel(float(f.get("input_bytes", 1e6)), float(f.get("input_sigma", 0.5))),
                float(f.get("sla_theta_ms", 10_000.0)), f.get("stage")))
        for w in data.get("workflows", []):
            stages = [Stage(s["name"], s["function"], int(s.get("fan_out", 1)), tuple(s.get("predecessors", ())),
                            float(s.get("output_ratio", 1.0))) for s in w["stages"]]
            cat.add_workflow(WorkflowSpec(w["id"], stages))
    except KeyError as e:
        raise ConfigError(f"catalog: missing field {e}") from None
    except (WorkflowError, TypeError, ValueError) as e:
        raise ConfigError(f"catalog: {e}") from None
    return cat


def config_from_dict(data: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    known = {"name", "seed", "replications", "cluster", "workload", "strategies", "predictor", "catalog"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")

    cl = dict(data.get("cluster") or {})
    latency = _build(LatencyConfig, cl.pop("latency", None), "cluster.latency")
    cluster = _build(ClusterConfig, {**cl, "latency": latency}, "cluster")

    wl = dict(data.get("workload") or {})
    trace_path = wl.pop("trace", None)
    workload = None
    if trace_path is not None:
        if wl:
            raise ConfigError("workload: 'trace' excludes generator settings")
        trace_path = os.path.join(base_dir, trace_path)
    else:
        preset = wl.pop("preset", None)
        if preset is not None:
            presets = scenario_presets()
            if preset not in presets:
                raise ConfigError(f"workload: unknown preset {preset!r}")
            wl = {**dataclasses.asdict(presets[preset]), **wl}
        workload = _build(WorkloadConfig, wl, "workload")

    strategies = [_build(SchedulerConfig, s, "strategies") for s in
                  (data.get("strategies") or [{"strategy": s} for s in ("bs", "nls", "rds", "pds")])]

    pr = dict(data.get("predictor") or {})
    forest = _build(ForestConfig, pr.pop("forest", None), "predictor.forest")
    predictor = _build(PredictorConfig, {**pr, "forest": forest}, "predictor")

    catalog = catalog_from_dict(data["catalog"]) if data.get("catalog") else default_catalog()
    if workload is not None:
        for app in workload.apps:
            if app not in catalog.workflows:
                raise ConfigError(f"workload: unknown app {app!r}")
    try:
        return ExperimentConfig(data.get("name", "experiment"), int(data.get("seed", 0)),
                                int(data.get("replications", 5)), cluster, workload, trace_path, strategies,
                                predictor, catalog)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from None
    return config_from_dict(data, os.path.dirname(os.path.abspath(path)))


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (frozenset, set)):
        return sorted(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    return obj


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def trace_hash(cfg: ExperimentConfig) -> str:
    """Identifies everything that determines the replayed traces and the
    cluster they run on; strategies are deliberately excluded so that
    reports of different strategies over the same trace can be compared."""
    trace = None
    if cfg.trace_path is not None:
        with open(cfg.trace_path, "rb") as fh:
            trace = hashlib.sha256(fh.read()).hexdigest()
    return _digest({
        "seed": cfg.seed, "replications": cfg.replications, "cluster": _plain(cfg.cluster),
        "workload": _plain(cfg.workload), "trace": trace, "catalog": _plain(cfg.catalog),
    })


def replication_seed(master, r) -> int:
    return int(np.random.SeedSequence([master, r]).generate_state(1)[0])


# statistics -----------------------------------------------------------------

def percentile(sorted_values, p):
    """Nearest-rank percentile of an already sorted sequence."""
    if not sorted_values:
        raise ValueError("empty sample")
    if p <= 0:
        return sorted_values[0]
    rank = math.ceil(p / 100.0 * len(sorted_values))
    return sorted_values[min(rank, len(sorted_values)) - 1]


def cdf(samples):
    """Empirical CDF as (value, fraction <= value) for each distinct value."""
    if len(samples) == 0:
        raise ValueError("cdf of an empty sample")
    xs = sorted(samples)
    n = len(xs)
    out = []
    for i, x in enumerate(xs):
        if i + 1 < n and xs[i + 1] == x:
            continue
        out.append((x, (i + 1) / n))
    return out


def cdf_points(samples, k=CDF_POINTS):
    """CDF thinned to at most ``k`` points at evenly spaced fractions."""
    xs = sorted(samples)
    if len(xs) <= k:
        return [[float(v), f] for v, f in cdf(xs)]
    return [[float(percentile(xs, 100.0 * j / k)), j / k] for j in range(1, k + 1)]


def summarize(values):
    xs = sorted(float(v) for v in values)
    out = {"count": len(xs), "mean": math.fsum(xs) / len(xs) if xs else None}
    for p in PERCENTILES:
        out["median" if p == 50 else f"p{p}"] = percentile(xs, p) if xs else None
    return out


def rolling_mean(values, window=RECOVERY_WINDOW):
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1): i + 1]
        out.append(math.fsum(chunk) / len(chunk))
    return out


def predictor_error_curves(samples, window=RECOVERY_WINDOW):
    """Per function: relative errors |pred - actual| / actual in observation
    order, and their rolling mean.  Samples without a prediction are
    skipped."""
    if samples is None:
        raise ValueError("missing sample log")
    per_fn = defaultdict(list)
    for s in samples:
        if s.predicted is not None:
            per_fn[s.fn].append(abs(s.predicted - s.actual) / s.actual)
    return {fn: {"errors": errs, "rolling": rolling_mean(errs, window)} for fn, errs in sorted(per_fn.items())}


def first_below(series, threshold, start=RECOVERY_WINDOW):
    """1-based index of the first value below ``threshold``, ignoring the
    first ``start - 1`` entries (rolling means over a partial window)."""
    for i in range(max(0, start - 1), len(series)):
        if series[i] < threshold:
            return i + 1
    return None


# records --------------------------------------------------------------------

INVOCATION_COLUMNS = ["replication", "strategy", "invocation", "fn", "workflow", "arrival", "node", "queued",
                      "exec_ms", "end_to_end", "theta", "violated"]


@dataclass(frozen=True)
class InvocationRecord:
    replication: int
    strategy: str
    invocation: str
    fn: str
    workflow: str
    arrival: float
    node: int
    queued: float
    exec_ms: float
    end_to_end: float
    theta: float
    violated: bool

    def row(self):
        return [self.replication, self.strategy, self.invocation, self.fn, self.workflow, repr(self.arrival),
                self.node, repr(self.queued), repr(self.exec_ms), repr(self.end_to_end), repr(self.theta),
                int(self.violated)]

    @classmethod
    def parse(cls, row):
        r, s, inv, fn, wf, arr, node, q, ex, e2e, th, v = row
        return cls(int(r), s, inv, fn, wf, float(arr), int(node), float(q), float(ex), float(e2e), float(th),
                   bool(int(v)))


@dataclass
class RunResult:
    """Everything one (replication, strategy) run produced."""
    replication: int
    strategy: str
    records: list
    decisions: list
    samples: list
    makespans: dict
    engine: Engine
    scheduler: object
    update_reports: list = field(default_factory=list)


@dataclass
class Report:
    data: dict

    @property
    def strategies(self) -> dict:
        return self.data["strategies"]

    def hash(self) -> str:
        d = copy.deepcopy(self.data)
        d["meta"].pop("wall_time_s", None)
        return _digest(d)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text) -> "Report":
        data = json.loads(text)
        if data.get("format") != REPORT_FORMAT:
            raise ValueError("not a report file")
        return cls(data)

    def summary(self) -> str:
        lines = [f"experiment {self.data['meta']['name']}  seed={self.data['meta']['seed']}  "
                 f"replications={self.data['meta']['replications']}",
                 f"{'strategy':<12}{'n':>7}{'mean':>10}{'p50':>10}{'p90':>10}{'p95':>10}{'p99':>10}{'sla viol':>10}"]
        for name, s in self.strategies.items():
            e = s["end_to_end"]
            lines.append(f"{name:<12}{e['count']:>7}{e['mean']:>10.1f}{e['median']:>10.1f}{e['p90']:>10.1f}"
                         f"{e['p95']:>10.1f}{e['p99']:>10.1f}{s['sla_violation_rate']:>10.4f}")
        for name, p in self.data.get("predictor", {}).items():
            err = p["rel_error"]
            if err["count"]:
                lines.append(f"predictor[{name}]  samples={err['count']}  rel.err mean={err['mean']:.3f}  "
                             f"p50={err['median']:.3f}  p90={err['p90']:.3f}")
        return "\n".join(lines)


def build_report(meta: dict, records, decisions, samples_by_strategy) -> Report:
    """Reduce persisted records into a report.  ``decisions`` are rows of
    :data:`DECISION_COLUMNS` prefixed by replication; ``samples_by_strategy``
    maps strategy label to its sample list (all replications, in order)."""
    by_strategy = defaultdict(list)
    for rec in records:
        by_strategy[rec.strategy].append(rec)
    reasons = defaultdict(Counter)
    for rep, row in decisions:
        reasons[row[2]][f"{row[3]}:{row[4]}"] += 1
    strategies = {}
    for name in meta["strategy_order"]:
        recs = by_strategy.get(name, [])
        e2e = [r.end_to_end for r in recs]
        violations = sum(1 for r in recs if r.violated)
        wf = defaultdict(lambda: [math.inf, -math.inf])
        for r in recs:
            if r.workflow:
                span = wf[(r.replication, r.workflow)]
                span[0] = min(span[0], r.arrival)
                span[1] = max(span[1], r.arrival + r.end_to_end)
        per_fn = defaultdict(list)
        for r in recs:
            per_fn[r.fn].append(r.end_to_end)
        strategies[name] = {
            "end_to_end": summarize(e2e),
            "sla_violation_rate": violations / len(recs) if recs else 0.0,
            "violations": violations,
            "cdf": cdf_points(e2e) if e2e else [],
            "reasons": dict(sorted(reasons[name].items())),
            "workflow_makespan": summarize([b - a for a, b in wf.values()]) if wf else None,
            "per_function_mean": {fn: math.fsum(v) / len(v) for fn, v in sorted(per_fn.items())},
        }
    predictor = {}
    for name, samples in samples_by_strategy.items():
        with_pred = [s for s in samples if s.predicted is not None]
        rel = [abs(s.predicted - s.actual) / s.actual for s in with_pred]
        curves = predictor_error_curves(with_pred)
        predictor[name] = {
            "rel_error": summarize(rel),
            "recovery": {fn: {"observations_to_10pct": first_below(c["rolling"], 0.1),
                              "rolling": c["rolling"][:50]} for fn, c in curves.items()},
        }
    return Report({"format": REPORT_FORMAT, "version": 1, "meta": meta, "strategies": strategies,
                   "predictor": predictor})


# running --------------------------------------------------------------------

def load_trace_for(cfg: ExperimentConfig, rep_seed: int, workload: Optional[WorkloadConfig] = None):
    if cfg.trace_path is not None:
        return read_trace(cfg.trace_path)
    wl = dataclasses.replace(workload or cfg.workload, seed=rep_seed)
    return generate(wl, cfg.catalog)


def run_once(cfg: ExperimentConfig, strategy: SchedulerConfig, trace, rep_seed: int, replication: int = 0,
             predictor=None, recorder=None, history=None) -> RunResult:
    sched = make_scheduler(strategy, predictor=predictor, recorder=recorder, history=history, seed=rep_seed)
    engine = Engine(cfg.cluster.build_nodes(cfg.catalog), cfg.catalog, sched, seed=rep_seed,
                    latency=cfg.cluster.latency, push_interval_ms=cfg.cluster.push_interval_ms)
    engine.load_trace(trace)
    engine.run()
    records = []
    for o in engine.outcomes:
        inv = engine.invocations[o.invocation]
        records.append(InvocationRecord(replication, strategy.label, o.invocation, o.fn, inv.workflow or "",
                                        inv.arrival, o.node, o.queued, o.exec_ms, o.end_to_end, inv.theta,
                                        o.violated))
    return RunResult(replication, strategy.label, records, sched.decisions,
                     list(recorder.samples) if recorder else [], engine.workflow_makespans(), engine, sched,
                     list(recorder.updates) if recorder else [])


def train_predictor(cfg: ExperimentConfig, rep_seed: int, workload: Optional[WorkloadConfig] = None):
    """Fit a forest on samples from a random-placement run over an
    independent trace.  Returns the forest and the execution history the
    warm-up accumulated."""
    base = workload or cfg.workload or scenario_presets()["empirical"]
    wl = dataclasses.replace(base, seed=rep_seed ^ 0x5EED, duration_ms=cfg.predictor.warmup_duration_ms)
    if wl.process == "empirical":
        wl = dataclasses.replace(wl, process="poisson")
    trace = generate(wl, cfg.catalog)
    recorder = SampleRecorder()
    warm = RandomScheduler(SchedulerConfig(strategy="random"), recorder=recorder, seed=rep_seed)
    engine = Engine(cfg.cluster.build_nodes(cfg.catalog), cfg.catalog, warm, seed=rep_seed ^ 0x5EED,
                    latency=cfg.cluster.latency, push_interval_ms=cfg.cluster.push_interval_ms)
    engine.load_trace(trace)
    engine.run()
    fcfg = dataclasses.replace(cfg.predictor.forest, seed=rep_seed)
    forest = Forest(fcfg, N_FEATURES)
    forest.train_initial(recorder.samples)
    return forest, warm.history


def run(cfg: ExperimentConfig, out_dir: Optional[str] = None, keep_results: bool = False):
    """Run every strategy over every replication.  Returns the report (and
    the raw per-run results when ``keep_results``)."""
    t0 = time.perf_counter()
    results = []
    for r in range(cfg.replications):
        rep_seed = replication_seed(cfg.seed, r)
        trace = load_trace_for(cfg, rep_seed)
        trained = None
        for strat in cfg.strategies:
            predictor = recorder = history = None
            if strat.strategy == "pds":
                if cfg.predictor.kind == "oracle":
                    predictor = OraclePredictor()
                    recorder = SampleRecorder()
                else:
                    if trained is None:
                        trained = train_predictor(cfg, rep_seed)
                    forest = Forest.loads(trained[0].dumps())
                    predictor = ForestPredictor(forest)
                    recorder = SampleRecorder(forest)
                    history = trained[1].copy()
            results.append(run_once(cfg, strat, trace, rep_seed, r, predictor, recorder, history))
    report = report_from_results(cfg, results)
    report.data["meta"]["wall_time_s"] = time.perf_counter() - t0
    if out_dir is not None:
        write_outputs(out_dir, report, results)
    return (report, results) if keep_results else report


def _meta(cfg: ExperimentConfig) -> dict:
    return {"name": cfg.name, "seed": cfg.seed, "replications": cfg.replications,
            "config_hash": trace_hash(cfg), "strategy_order": [s.label for s in cfg.strategies],
            "predictor": cfg.predictor.kind}


def report_from_results(cfg, results) -> Report:
    records = [rec for res in results for rec in res.records]
    decisions = [(res.replication, d.row()) for res in results for d in res.decisions]
    decisions = [(rep, [str(v) for v in row]) for rep, row in decisions]
    samples = defaultdict(list)
    for res in results:
        if res.samples:
            samples[res.strategy].extend(res.samples)
    return build_report(_meta(cfg), records, decisions, dict(samples))


def write_outputs(out_dir, report: Report, results):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(report.summary() + "\n")
    with open(os.path.join(out_dir, "invocations.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INVOCATION_COLUMNS)
        for res in results:
            for rec in res.records:
                w.writerow(rec.row())
    with open(os.path.join(out_dir, "decisions.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replication"] + DECISION_COLUMNS)
        for res in results:
            for d in res.decisions:
                w.writerow([res.replication] + d.row())
    samples = defaultdict(list)
    for res in results:
        samples[res.strategy].extend(res.samples)
    for name, ss in samples.items():
        if ss:
            write_samples(os.path.join(out_dir, f"samples-{name}.csv"), ss)
    with open(os.path.join(out_dir, "events.jsonl"), "w") as fh:
        for res in results:
            for t, kind, payload in res.engine.log:
                fh.write(json.dumps({"replication": res.replication, "strategy": res.strategy, "t": t,
                                     "kind": kind, **payload}, sort_keys=True) + "\n")


def report_from_files(out_dir) -> Report:
    """Rebuild the report from the CSV records written by :func:`run`."""
    with open(os.path.join(out_dir, "report.json")) as fh:
        meta = dict(Report.from_json(fh.read()).data["meta"])
    wall = meta.pop("wall_time_s", None)
    with open(os.path.join(out_dir, "invocations.csv"), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    records = [InvocationRecord.parse(r) for r in rows]
    with open(os.path.join(out_dir, "decisions.csv"), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    decisions = [(int(r[0]), r[1:]) for r in rows]
    samples = {}
    for name in meta["strategy_order"]:
        path = os.path.join(out_dir, f"samples-{name}.csv")
        if os.path.exists(path):
            samples[name] = read_samples(path)
    report = build_report(meta, records, decisions, samples)
    if wall is not None:
        report.data["meta"]["wall_time_s"] = wall
    return report


def load_report(path) -> Report:
    with open(path) as fh:
        return Report.from_json(fh.read())


# comparison -----------------------------------------------------------------

COMPARE_METRICS = ("mean", "median", "p90", "p95", "p99")


def improvement(a, b):
    """Relative reduction of ``a`` against baseline ``b``: (b - a) / b.
    Positive means ``a`` is lower (better)."""
    if b == 0:
        return 0.0 if a == 0 else None
    return (b - a) / b


def compare(report_a: Report, report_b: Report, strategy_a=None, strategy_b=None) -> dict:
    """Improvement table of one strategy in ``report_a`` over one in
    ``report_b``.  Strategies default to the only one in each report."""
    if report_a.data["meta"]["config_hash"] != report_b.data["meta"]["config_hash"]:
        raise ValueError("reports were produced from different traces or clusters")

    def pick(report, name):
        if name is None:
            if len(report.strategies) != 1:
                raise ValueError("report holds several strategies; name one")
            name = next(iter(report.strategies))
        if name not in report.strategies:
            raise ValueError(f"strategy {name!r} not in report")
        return name, report.strategies[name]

    na, a = pick(report_a, strategy_a)
    nb, b = pick(report_b, strategy_b)
    rows = {m: improvement(a["end_to_end"][m], b["end_to_end"][m]) for m in COMPARE_METRICS}
    rows["sla_violation_rate"] = improvement(a["sla_violation_rate"], b["sla_violation_rate"])
    return {"a": na, "b": nb, "convention": "(b - a) / b; positive = a lower than b", "improvement": rows}


def format_compare(table) -> str:
    lines = [f"improvement of {table['a']} over {table['b']}  [{table['convention']}]"]
    for m, v in table["improvement"].items():
        lines.append(f"  {m:<20}{'n/a' if v is None else f'{100 * v:+.1f}%'}")
    return "\n".join(lines)


# audits and scenarios ---------------------------------------------------------

def audit(result: RunResult):
    slots = {n.id: n.cpu_slots for n in result.engine.nodes}
    return audit_log(result.engine.log, slots)


def recovery_scenario(cfg: ExperimentConfig, known_apps, new_app, rep_seed=None, new_from_ms=None,
                      new_rate_rps=None):
    """Train on ``known_apps`` only, then run pds on a trace where
    ``new_app`` joins at ``new_from_ms`` (at ``new_rate_rps``, default the
    workload rate).  Returns per-function rolling relative-error curves for
    the new app's functions, and the run result."""
    rep_seed = replication_seed(cfg.seed, 0) if rep_seed is None else rep_seed
    base = cfg.workload
    forest, history = train_predictor(cfg, rep_seed, dataclasses.replace(base, apps=tuple(known_apps)))
    new_from_ms = base.duration_ms / 2 if new_from_ms is None else new_from_ms
    old = generate(dataclasses.replace(base, apps=tuple(known_apps), seed=rep_seed), cfg.catalog)
    new = generate(dataclasses.replace(base, apps=(new_app,), seed=rep_seed + 1,
                                       rate_rps=new_rate_rps or base.rate_rps,
                                       duration_ms=base.duration_ms - new_from_ms), cfg.catalog)
    shifted = []
    for ev in new:
        inv = dataclasses.replace(ev.invocation, arrival=ev.arrival + new_from_ms,
                                  deadline=ev.arrival + new_from_ms + ev.invocation.theta,
                                  id=f"new-{ev.invocation.id}", workflow=f"new-{ev.instance}")
        shifted.append(dataclasses.replace(ev, arrival=inv.arrival, instance=inv.workflow, invocation=inv))
    trace = sorted(old + shifted, key=lambda e: (e.arrival, e.instance))
    recorder = SampleRecorder(forest)
    strat = next((s for s in cfg.strategies if s.strategy == "pds"), SchedulerConfig(strategy="pds"))
    res = run_once(cfg, strat, trace, rep_seed, 0, ForestPredictor(forest), recorder, history.copy())
    wf = cfg.catalog.workflows[new_app]
    fns = {s.function for s in wf.stages}
    curves = predictor_error_curves([s for s in res.samples if s.fn in fns])
    return curves, res


RECOVERY_FUNCTION = "batch-score"


def recovery_setup(seed=0, duration_ms=1_200_000.0):
    """A compute-dominated single-stage app (``score``) that the predictor
    has never seen, introduced halfway through a mixed four-app workload.
    Returns ``(config, known_apps, new_app, new_rate_rps)``."""
    d = preset_configs()["video"]
    d.update(name="recovery", seed=seed, replications=1)
    cfg = config_from_dict(d)
    cfg.catalog.add_function(FunctionSpec(RECOVERY_FUNCTION, frozenset({"score/pkg00"}), ComputeModel(5000.0, 0.05),
                                          SizeModel(5e6), 60_000.0, "score"))
    cfg.catalog.add_workflow(WorkflowSpec("score", (Stage("score", RECOVERY_FUNCTION),)))
    known = ("video", "log", "doc", "ml")
    cfg.workload = WorkloadConfig(duration_ms=duration_ms, rate_rps=0.5, apps=known, seed=seed)
    return cfg, known, "score", 0.1


# presets --------------------------------------------------------------------

def preset_configs() -> dict:
    """Ready-to-run experiment configs (as plain dicts, the YAML layout)."""
    common_cluster = {"nodes": 10, "cpu_slots": 4, "latency": {"dep_cache_ttl_ms": 60_000.0}}
    strategies = [{"strategy": s} for s in ("bs", "nls", "rds", "pds")]
    out = {}
    for app in ("video", "log", "doc", "ml"):
        out[app] = {
            "name": app, "seed": 0, "replications": 3, "cluster": copy.deepcopy(common_cluster),
            "workload": {"preset": app}, "strategies": copy.deepcopy(strategies),
            "predictor": {"kind": "forest"},
        }
    out["empirical"] = {
        "name": "empirical", "seed": 0, "replications": 1,
        "cluster": {**copy.deepcopy(common_cluster), "spare_node_slots": 64, "spare_node_provisioned": True},
        "workload": {"preset": "empirical"},
        "strategies": [{"strategy": "rds"}, {"strategy": "pds"}],
        "predictor": {"kind": "oracle"},
    }
    return out
