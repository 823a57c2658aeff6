import numpy as np
import pytest

from locsched.model import Catalog, ComputeModel, DataRef, FunctionSpec, Invocation, SizeModel, Stage, WorkflowSpec
from locsched.schedulers import ConstantPredictor, SchedulerConfig, make_scheduler
from locsched.sim import Engine, LatencyConfig, make_nodes

MB = 1_000_000


def small_catalog():
    cat = Catalog()
    cat.add_function(FunctionSpec("f", frozenset({"a", "b", "c", "d"}), ComputeModel(1000.0, 0.0), SizeModel(MB),
                                  10_000.0))
    cat.add_function(FunctionSpec("g", frozenset(), ComputeModel(200.0, 0.0), SizeModel(MB), 10_000.0))
    cat.add_function(FunctionSpec("src", frozenset(), ComputeModel(100.0, 0.0), SizeModel(10 * MB), 10_000.0))
    cat.add_function(FunctionSpec("sink", frozenset(), ComputeModel(100.0, 0.0), SizeModel(MB), 10_000.0))
    cat.add_workflow(WorkflowSpec("pipe", (Stage("src", "src", 1, (), 1.0), Stage("sink", "sink", 2, ("src",)))))
    return cat


@pytest.fixture
def catalog():
    return small_catalog()


def inv_of(cat, fn_id, id="i0", arrival=0.0, size=MB, refs=()):
    return Invocation.create(id, cat.functions[fn_id], arrival, size, refs)


def make_engine(strategy="pds", nodes=3, slots=1, predictor=None, catalog=None, push_ms=50.0, **cfg):
    cat = catalog or small_catalog()
    sched = make_scheduler(SchedulerConfig(strategy=strategy, **cfg), predictor=predictor)
    eng = Engine(make_nodes(nodes, cpu_slots=slots), cat, sched, latency=LatencyConfig(), push_interval_ms=push_ms)
    return eng, sched


def arrive(engine, inv, compute=None):
    """Register ``inv`` as arrived without going through the scheduler."""
    engine.invocations[inv.id] = inv
    engine.compute_draw[inv.id] = engine.fn(inv.fn).base_compute.mean_ms if compute is None else compute
    engine.arrived += 1


def occupy(engine, node_id, duration, id="blocker"):
    """Fill one slot of ``node_id`` until ``engine.now + duration``."""
    b = Invocation.create(id, engine.fn("g"), engine.now, 0)
    arrive(engine, b, compute=duration)
    engine.place(b, node_id, engine.now)
    return b


def warm(engine, node_id, fn_id, until=1e12):
    engine.node(node_id).warm_pool.setdefault(fn_id, []).append(until)
    refresh(engine)


def refresh(engine):
    for n in engine.nodes:
        engine.scheduler.on_push(n, engine.now)


def data_ref(engine, data_id, node, size):
    engine.data.register(data_id, node, size)
    return DataRef(data_id, size, node)


def constant(value=1000.0, **per_node):
    return ConstantPredictor(value, {int(k[1:]): v for k, v in per_node.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
