"""Locality-aware delay scheduling for serverless workflows, with a
deterministic cluster simulator to evaluate it."""

from locsched.model import (
    FunctionSpec,
    Invocation,
    SlaOutcome,
    Stage,
    WorkflowSpec,
    WorkflowError,
    validate_workflow,
)

__version__ = "0.1.0"

__all__ = [
    "FunctionSpec",
    "Invocation",
    "SlaOutcome",
    "Stage",
    "WorkflowSpec",
    "WorkflowError",
    "validate_workflow",
]
