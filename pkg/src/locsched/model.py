"""Static vocabulary shared by the simulator, the schedulers and the
workload generator: functions, workflows, invocations and SLA outcomes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional


class WorkflowError(ValueError):
    pass


@dataclass(frozen=True)
class ComputeModel:
    """Gamma-distributed pure compute time, parameterised by mean and
    coefficient of variation."""

    mean_ms: float
    cv: float = 0.05

    def __post_init__(self):
        if self.mean_ms <= 0:
            raise ValueError("base compute mean must be > 0")
        if self.cv < 0:
            raise ValueError("compute cv must be >= 0")

    def sample(self, rng) -> float:
        if self.cv == 0:
            return self.mean_ms
        shape = 1.0 / (self.cv * self.cv)
        return float(rng.gamma(shape, self.mean_ms / shape))


@dataclass(frozen=True)
class SizeModel:
    """Log-normal byte size given by its median and log-space sigma."""

    median_bytes: float
    sigma: float = 0.5

    def __post_init__(self):
        if self.median_bytes < 0 or self.sigma < 0:
            raise ValueError("invalid size distribution parameters")

    def sample(self, rng) -> int:
        if self.median_bytes == 0:
            return 0
        return int(self.median_bytes * float(rng.lognormal(0.0, self.sigma)))


@dataclass(frozen=True)
class FunctionSpec:
    id: str
    deps: frozenset = frozenset()
    base_compute: ComputeModel = ComputeModel(1000.0)
    input_size: SizeModel = SizeModel(1e6)
    sla_theta: float = 10_000.0
    stage: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "deps", frozenset(self.deps))
        if self.sla_theta <= 0:
            raise ValueError(f"{self.id}: sla_theta must be > 0")

    @property
    def dep_count(self) -> int:
        return len(self.deps)


@dataclass(frozen=True)
class Stage:
    name: str
    function: str
    fan_out: int = 1
    predecessors: tuple = ()
    # output bytes = input bytes * output_ratio, split evenly over consumers
    output_ratio: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "predecessors", tuple(self.predecessors))


@dataclass(frozen=True)
class WorkflowSpec:
    id: str
    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def successors(self, name: str) -> list:
        return [s for s in self.stages if name in s.predecessors]

    def check(self) -> "WorkflowSpec":
        result = validate_workflow(self)
        if not result.ok:
            raise WorkflowError(f"workflow {self.id!r}: {result.error}")
        return self


class Validation(NamedTuple):
    ok: bool
    error: Optional[str] = None


def validate_workflow(spec: WorkflowSpec) -> Validation:
    """Accept iff the stage list is non-empty, acyclic, fan-outs are positive
    and every predecessor names an earlier stage."""
    if not spec.stages:
        return Validation(False, "empty stage list")
    index = {}
    for i, s in enumerate(spec.stages):
        if s.name in index:
            return Validation(False, f"duplicate stage name {s.name!r}")
        index[s.name] = i
    for s in spec.stages:
        if s.fan_out < 1:
            return Validation(False, f"stage {s.name!r}: fan_out must be >= 1")
        for p in s.predecessors:
            if p not in index:
                return Validation(False, f"stage {s.name!r}: unknown predecessor {p!r}")

    # colour-marking DFS; a back edge is a cycle
    state = {}

    def visit(name):
        state[name] = 1
        for p in spec.stages[index[name]].predecessors:
            mark = state.get(p, 0)
            if mark == 1:
                return True
            if mark == 0 and visit(p):
                return True
        state[name] = 2
        return False

    for s in spec.stages:
        if state.get(s.name, 0) == 0 and visit(s.name):
            return Validation(False, "cycle detected")

    for i, s in enumerate(spec.stages):
        for p in s.predecessors:
            if index[p] >= i:
                return Validation(False, f"forward reference: stage {s.name!r} lists {p!r}")
    return Validation(True)


@dataclass(frozen=True)
class DataRef:
    data_id: str
    size: int
    producer: Optional[int]

    def __post_init__(self):
        if self.size < 0:
            raise ValueError("data size must be >= 0")


@dataclass(frozen=True)
class Invocation:
    id: str
    fn: str
    arrival: float
    input_size: int
    deadline: float
    theta: float
    predecessor_outputs: tuple = ()
    workflow: Optional[str] = None
    stage: Optional[str] = None
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "predecessor_outputs", tuple(self.predecessor_outputs))
        if self.input_size < 0:
            raise ValueError("input_size must be >= 0")
        if self.deadline != self.arrival + self.theta:
            raise ValueError("deadline must equal arrival + theta")

    @classmethod
    def create(cls, id, fn: FunctionSpec, arrival, input_size, predecessor_outputs=(), **kw):
        return cls(
            id=id,
            fn=fn.id,
            arrival=arrival,
            input_size=int(input_size),
            deadline=arrival + fn.sla_theta,
            theta=fn.sla_theta,
            predecessor_outputs=tuple(predecessor_outputs),
            **kw,
        )

    @property
    def predecessor_bytes(self) -> int:
        return sum(d.size for d in self.predecessor_outputs)


@dataclass(frozen=True)
class SlaOutcome:
    invocation: str
    fn: str
    end_to_end: float
    violated: bool
    node: int = -1
    queued: float = 0.0
    exec_ms: float = 0.0

    @classmethod
    def evaluate(cls, inv: Invocation, completed_at: float, **kw) -> "SlaOutcome":
        e2e = completed_at - inv.arrival
        return cls(inv.id, inv.fn, e2e, e2e > inv.theta, **kw)


@dataclass
class Catalog:
    """Function and workflow definitions available to one experiment."""

    functions: dict = field(default_factory=dict)
    workflows: dict = field(default_factory=dict)

    def add_function(self, fn: FunctionSpec):
        self.functions[fn.id] = fn

    def add_workflow(self, wf: WorkflowSpec):
        wf.check()
        for s in wf.stages:
            if s.function not in self.functions:
                raise WorkflowError(f"workflow {wf.id!r}: unknown function {s.function!r}")
        self.workflows[wf.id] = wf
