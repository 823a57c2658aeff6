"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line with the
measured values; run ``python3 tests/test_acceptance.py`` for just the
summary table, or ``pytest -s tests/test_acceptance.py``.
"""

import math
import pathlib
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from conftest import make_engine, occupy, warm  # noqa: E402
from locsched import schedulers as S  # noqa: E402
from locsched.experiment import (audit, config_from_dict, first_below, load_config, preset_configs,  # noqa: E402
                                 recovery_scenario, recovery_setup, run)
from locsched.forest import Forest, ForestConfig  # noqa: E402
from locsched.model import Invocation  # noqa: E402
from locsched.profiling import N_FEATURES, ObservedSample  # noqa: E402
from locsched.schedulers import ConstantPredictor, OraclePredictor, SchedulerConfig, make_scheduler  # noqa: E402
from locsched.sim import Engine, audit_log, make_nodes  # noqa: E402
from locsched.workload import WorkloadConfig, default_catalog, generate  # noqa: E402

CONFIGS = pathlib.Path(__file__).parent.parent / "configs"
LINES = {}
AUDITS = []  # (run label, arrivals, completions, problems)


def report(n, ok, detail, elapsed, limit=None):
    timing = f"{elapsed:.1f}s" + (f" (limit {limit:.0f}s)" if limit else "")
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{timing}]"
    LINES[n] = line
    print(line, flush=True)
    return ok and (limit is None or elapsed < limit)


def audited_run(cfg, label):
    """run() that audits every (replication, strategy) event log it produced."""
    rep, results = run(cfg, keep_results=True)
    for res in results:
        arrivals, completions, problems = audit(res)
        AUDITS.append((f"{label}/{res.strategy}/r{res.replication}", arrivals, completions, problems))
    return rep, results


def preset(name, **changes):
    d = preset_configs()[name]
    for key, value in changes.items():
        section, _, field = key.partition("__")
        if field:
            d.setdefault(section, {})[field] = value
        else:
            d[section] = value
    return config_from_dict(d)


# 1 -----------------------------------------------------------------------------

def compile_forest_kernels():
    """Fit a one-tree forest so numba compiles (or loads) the split kernels."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = ForestConfig(n_trees=1, max_depth=2)
    Forest(cfg).train_initial([ObservedSample(rng.uniform(0, 1, N_FEATURES), 1.0 + i, "f", 0, float(i))
                               for i in range(40)])
    return time.perf_counter() - t0


def criterion_1():
    # one-time JIT compilation is reported but kept out of the timed window
    jit = compile_forest_kernels()
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 10, (2000, N_FEATURES))
    y = 100 + 50 * X[:, 0] + 20 * X[:, 3] * X[:, 5] + rng.normal(0, 5, 2000)
    forest = Forest(ForestConfig()).train_initial([ObservedSample(x, v, "f", 0, float(i))
                                                   for i, (x, v) in enumerate(zip(X, y))])
    probes = rng.uniform(-1, 11, (1000, N_FEATURES))
    brute = np.array([math.fsum(t.predict_one(p) for t in forest.trees) / len(forest.trees) for p in probes])
    batched = forest.predict_many(probes)
    single = np.array([forest.predict(p) for p in probes])
    worst = max(np.max(np.abs(batched - brute) / brute), np.max(np.abs(single - brute) / brute))
    ok = len(forest.trees) == 50 and worst <= 1e-9
    return report(1, ok, f"K={len(forest.trees)} probes=1000 max rel dev={worst:.2e} (<=1e-9) jit={jit:.1f}s",
                  time.perf_counter() - t0, 5)


# 2 -----------------------------------------------------------------------------

def branch_no_local(**cfg):
    eng, sched = make_engine("pds", predictor=ConstantPredictor(1.0, {0: 1500, 1: 900, 2: 1200}), **cfg)
    eng.submit(Invocation.create("i0", eng.fn("f"), 0.0, 1000))
    return eng, sched


def branch_benefit_insufficient(**cfg):
    eng, sched = make_engine("pds", predictor=ConstantPredictor(1000.0, {0: 900.0}), **cfg)
    warm(eng, 0, "f")
    eng.submit(Invocation.create("i0", eng.fn("f"), 0.0, 1000))
    return eng, sched


def branch_target_available(**cfg):
    eng, sched = make_engine("pds", predictor=ConstantPredictor(1000.0, {0: 500.0}), **cfg)
    warm(eng, 0, "f")
    occupy(eng, 0, 300.0)
    eng.submit(Invocation.create("i0", eng.fn("f"), 0.0, 1000))
    return eng, sched


def branch_forced_fallback(**cfg):
    eng, sched = make_engine("pds", predictor=ConstantPredictor(7000.0, {0: 500.0}), **cfg)
    warm(eng, 0, "f")
    occupy(eng, 0, 20_000.0)
    eng.submit(Invocation.create("i0", eng.fn("f"), 0.0, 1000))
    return eng, sched


BRANCHES = [
    # local set empty: argmin over {0: 1500, 1: 900, 2: 1200}
    ("no local node", branch_no_local, [("immediate", S.NO_LOCAL, 1, 0.0)]),
    # 900 >= 0.8 * 1000
    ("benefit insufficient", branch_benefit_insufficient, [("immediate", S.BENEFIT_INSUFFICIENT, 0, 0.0)]),
    # 500 < 800; node 0 frees at 500 (cold) + 300
    ("delay, target available", branch_target_available,
     [("delay", S.DELAY_FOR_LOCALITY, 0, 0.0), ("immediate", S.TARGET_AVAILABLE, 0, 800.0)]),
    # safe budget 10000 * 0.9 = 9000 is lost once elapsed + 7000 >= 9000, first tick at 2000
    ("delay, forced fallback", branch_forced_fallback,
     [("delay", S.DELAY_FOR_LOCALITY, 0, 0.0), ("immediate", S.SLA_FORCED, 1, 2000.0)]),
]


def criterion_2():
    t0 = time.perf_counter()
    failures = []
    checked = 0
    for variant in ({"charge_wait": False}, {}):
        for name, build, expected in BRANCHES:
            eng, sched = build(**variant)
            eng.run()
            got = [(d.kind, d.reason, d.node, d.time) for d in sched.decisions if d.invocation == "i0"]
            checked += 1
            if got != expected:
                failures.append(f"{name} {variant}: {got}")
    ok = not failures
    detail = f"{checked} branch cases match" if ok else "; ".join(failures)
    return report(2, ok, detail, time.perf_counter() - t0, 1)


# 3 -----------------------------------------------------------------------------

def criterion_3():
    t0 = time.perf_counter()
    cfg = preset("empirical")
    assert cfg.predictor.kind == "oracle"
    beta = cfg.strategies[1].beta
    theta_min = min(f.sla_theta for f in cfg.catalog.functions.values())
    guard = beta * theta_min > cfg.strategies[1].monitor_interval_ms
    rep, _ = audited_run(cfg, "empirical")
    pds = rep.strategies["pds"]["sla_violation_rate"]
    rds = rep.strategies["rds"]["sla_violation_rate"]
    n = rep.strategies["pds"]["end_to_end"]["count"]
    ok = guard and pds == 0 and rds > 0
    return report(3, ok, f"pds violation rate={pds:.4f} (==0), rds={rds:.4f} (>0), {n} invocations, "
                         f"beta*theta_min > I: {guard}", time.perf_counter() - t0, 60)


# 4 -----------------------------------------------------------------------------

def criterion_4():
    parts, ok, slowest = [], True, 0.0
    for name in ("video", "log", "doc", "ml"):
        t0 = time.perf_counter()
        rep, _ = audited_run(preset(name), name)
        elapsed = time.perf_counter() - t0
        slowest = max(slowest, elapsed)
        means = {s: v["end_to_end"]["mean"] for s, v in rep.strategies.items()}
        gain = (means["rds"] - means["pds"]) / means["rds"]
        if name in ("video", "log"):
            good = all(means["pds"] < means[s] for s in ("bs", "nls", "rds"))
            shown = " ".join(f"{s}={m:.0f}" for s, m in means.items())
        else:
            good = gain >= 0.30
            shown = f"pds={means['pds']:.0f} rds={means['rds']:.0f} gain={100 * gain:.1f}%"
        ok = ok and good and elapsed < 120
        parts.append(f"{name}: {shown} {'ok' if good else 'NOT MET'} {elapsed:.0f}s")
    return report(4, ok, "mean ms; pds lowest on video/log, >=30% under rds on doc/ml, <120s each | "
                  + " | ".join(parts), slowest)


# 5 -----------------------------------------------------------------------------

def criterion_5():
    t0 = time.perf_counter()
    means = {}
    for level in (1, 5):
        cfg = preset("video", replications=1, workload__concurrency_level=level)
        rep, _ = audited_run(cfg, f"video-c{level}")
        means[level] = {s: v["end_to_end"]["mean"] for s, v in rep.strategies.items()}
    factor = {s: means[5][s] / means[1][s] for s in means[1]}
    ok = factor["bs"] > factor["pds"] and factor["nls"] > factor["pds"]
    shown = " ".join(f"{s}={f:.2f}" for s, f in factor.items())
    return report(5, ok, f"mean latency factor c=5 / c=1: {shown} (bs, nls > pds)", time.perf_counter() - t0, 300)


# 6 -----------------------------------------------------------------------------

def criterion_6():
    t0 = time.perf_counter()
    cfg, known, new_app, new_rate = recovery_setup(seed=0)
    curves, res = recovery_scenario(cfg, known, new_app, new_rate_rps=new_rate)
    arrivals, completions, problems = audit(res)
    AUDITS.append(("recovery/pds", arrivals, completions, problems))
    fn = cfg.catalog.workflows[new_app].stages[0].function
    rolling = curves[fn]["rolling"]
    hit = first_below(rolling, 0.10)
    ok = hit is not None and hit <= 30
    first = rolling[4] if len(rolling) > 4 else float("nan")
    return report(6, ok, f"unseen fn {fn}: rolling rel. error < 10% at observation {hit} (<=30); "
                         f"first full window {100 * first:.1f}%", time.perf_counter() - t0, 60)


# 7 -----------------------------------------------------------------------------

def criterion_7():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "quick.yaml")
    a, ra = audited_run(cfg, "determinism-a")
    b, rb = audited_run(cfg, "determinism-b")
    same_log = [[d.row() for d in r.decisions] for r in ra] == [[d.row() for d in r.decisions] for r in rb]
    same_events = all(x.engine.log == y.engine.log for x, y in zip(ra, rb))
    ok = a.hash() == b.hash() and same_log and same_events
    return report(7, ok, f"report hash {a.hash()[:12]} == {b.hash()[:12]}, decision logs equal: {same_log}, "
                         f"event logs equal: {same_events}", time.perf_counter() - t0, 60)


# 8 -----------------------------------------------------------------------------

def criterion_8():
    t0 = time.perf_counter()
    catalog = default_catalog()
    sched = make_scheduler(SchedulerConfig(strategy="pds"), predictor=OraclePredictor())
    eng = Engine(make_nodes(10, cpu_slots=4), catalog, sched, seed=1)
    eng.load_trace(generate(WorkloadConfig(duration_ms=3_000_000, rate_rps=1.0, apps=("video", "log", "doc", "ml"),
                                           seed=1), catalog))
    eng.run()
    arrivals, completions, problems = audit_log(eng.log, {n.id: n.cpu_slots for n in eng.nodes})
    AUDITS.append(("overhead/pds", arrivals, completions, problems))
    ms = np.array(sched.core_ns) / 1e6
    mean, p99, p999 = ms.mean(), np.percentile(ms, 99), np.percentile(ms, 99.9)
    ok = len(ms) >= 10_000 and mean < 1.0 and p99 < 1.0
    return report(8, ok, f"{len(ms)} decisions at 10 nodes: mean={1000 * mean:.0f}us p99={1000 * p99:.0f}us "
                         f"(<1ms); p99.9={p999:.2f}ms max={ms.max():.2f}ms", time.perf_counter() - t0)


# 9 -----------------------------------------------------------------------------

def criterion_9():
    t0 = time.perf_counter()
    if not AUDITS:
        audited_run(load_config(CONFIGS / "quick.yaml"), "quick")
    bad = [(label, a, c, p[:2]) for label, a, c, p in AUDITS if a != c or p]
    runs = len(AUDITS)
    events = sum(a for _, a, _, _ in AUDITS)
    ok = not bad
    detail = f"{runs} audited runs, {events} arrivals, all completed once, occupancy <= slots"
    if bad:
        detail = f"{len(bad)} of {runs} runs fail: {bad[:3]}"
    return report(9, ok, detail, time.perf_counter() - t0)


# pytest wrappers ---------------------------------------------------------------

@pytest.fixture(autouse=True)
def _show(capsys):
    with capsys.disabled():
        yield


def test_criterion_1_forest_average_exact():
    assert criterion_1()


def test_criterion_2_decision_branches():
    assert criterion_2()


@pytest.mark.slow
def test_criterion_3_sla_guard():
    assert criterion_3()


@pytest.mark.slow
def test_criterion_4_directional_latency():
    assert criterion_4()


@pytest.mark.slow
def test_criterion_5_concurrency_degradation():
    assert criterion_5()


@pytest.mark.slow
def test_criterion_6_predictor_recovery():
    assert criterion_6()


def test_criterion_7_determinism():
    assert criterion_7()


@pytest.mark.slow
def test_criterion_8_decision_overhead():
    assert criterion_8()


def test_criterion_9_event_log_audit():
    assert criterion_9()


if __name__ == "__main__":
    results = [criterion_1(), criterion_2(), criterion_3()]
    results += [criterion_4(), criterion_5(), criterion_6(), criterion_7(), criterion_8(), criterion_9()]
    print("\n".join(["", "summary"] + [LINES[n] for n in sorted(LINES)]))
    sys.exit(0 if all(results) else 1)
