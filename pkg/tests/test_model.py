import numpy as np
import pytest

from locsched.model import (Catalog, ComputeModel, FunctionSpec, Invocation, SizeModel, SlaOutcome, Stage,
                            WorkflowError, WorkflowSpec, validate_workflow)


def test_video_chain_accepted():
    wf = WorkflowSpec("video", (Stage("split", "s"), Stage("transcode", "t", 4, ("split",)),
                                Stage("merge", "m", 1, ("transcode",))))
    assert validate_workflow(wf).ok


def test_single_stage_accepted():
    assert validate_workflow(WorkflowSpec("one", (Stage("only", "f"),))).ok


def test_forward_reference_rejected():
    wf = WorkflowSpec("w", (Stage("a", "f"), Stage("b", "f", 1, ("c",)), Stage("c", "f")))
    v = validate_workflow(wf)
    assert not v.ok and "forward reference" in v.error


@pytest.mark.parametrize("stages,needle", [
    ((), "empty"),
    ((Stage("a", "f"), Stage("a", "f")), "duplicate"),
    ((Stage("a", "f", 0),), "fan_out"),
    ((Stage("a", "f", 1, ("zz",)),), "unknown predecessor"),
    ((Stage("a", "f", 1, ("b",)), Stage("b", "f", 1, ("a",))), "cycle"),
    ((Stage("a", "f", 1, ("a",)),), "cycle"),
])
def test_rejections_name_the_violation(stages, needle):
    v = validate_workflow(WorkflowSpec("w", stages))
    assert not v.ok and needle in v.error


def test_check_raises_workflow_error():
    with pytest.raises(WorkflowError, match="cycle"):
        WorkflowSpec("w", (Stage("a", "f", 1, ("a",)),)).check()


def test_catalog_rejects_unknown_function():
    with pytest.raises(WorkflowError, match="unknown function"):
        Catalog().add_workflow(WorkflowSpec("w", (Stage("a", "nope"),)))


def test_deadline_is_arrival_plus_theta():
    fn = FunctionSpec("f", sla_theta=2500.0)
    inv = Invocation.create("x", fn, 123.25, 10)
    assert inv.deadline - inv.arrival == 2500.0
    with pytest.raises(ValueError):
        Invocation("x", "f", 0.0, 1, 10.0, 5.0)


def test_invalid_specs():
    with pytest.raises(ValueError):
        FunctionSpec("f", sla_theta=0)
    with pytest.raises(ValueError):
        ComputeModel(0)
    with pytest.raises(ValueError):
        SizeModel(-1)
    with pytest.raises(ValueError):
        Invocation.create("x", FunctionSpec("f"), 0.0, -1)


def test_sla_outcome():
    inv = Invocation.create("x", FunctionSpec("f", sla_theta=1000.0), 100.0, 1)
    assert not SlaOutcome.evaluate(inv, 1100.0).violated
    out = SlaOutcome.evaluate(inv, 1100.5)
    assert out.violated and out.end_to_end == 1000.5


def test_compute_model_moments(rng):
    m = ComputeModel(800.0, 0.2)
    xs = np.array([m.sample(rng) for _ in range(20_000)])
    assert abs(xs.mean() / 800.0 - 1) < 0.01
    assert abs(xs.std() / xs.mean() - 0.2) < 0.01
    assert ComputeModel(800.0, 0.0).sample(rng) == 800.0


def test_size_model_median(rng):
    m = SizeModel(50e6, 0.8)
    xs = np.array([m.sample(rng) for _ in range(20_000)])
    assert abs(np.median(xs) / 50e6 - 1) < 0.03
    assert SizeModel(0).sample(rng) == 0
