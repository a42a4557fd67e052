"""Exception hierarchy for aov-flow."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .graph import ValidationReport


class FlowError(Exception):
    """Base class for every error raised by aov-flow."""


class GraphValidationError(FlowError, ValueError):
    """A graph failed validation."""

    def __init__(self, report: ValidationReport):
        self.report = report
        super().__init__("invalid workflow graph: " + "; ".join(str(v) for v in report.violations))


class StateTransitionError(FlowError, ValueError):
    """Illegal status transition for a subtask."""


class UnknownSubtaskError(FlowError, KeyError):
    """A subtask id is not present in the workflow state."""

    def __str__(self) -> str:
        return f"unknown subtask: {self.args[0]}" if self.args else "unknown subtask"


class SnapshotParseError(FlowError, ValueError):
    """A workflow snapshot document could not be loaded."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{message} (at {key!r})" if key is not None else message)


class MergeRejectedError(FlowError, ValueError):
    """A proposed structural update cannot be merged."""


class ResponseParseError(FlowError, ValueError):
    """A planner response could not be parsed.

    ``diagnosis`` is phrased so it can be sent back to the planner verbatim.
    """

    def __init__(self, diagnosis: str):
        self.diagnosis = diagnosis
        super().__init__(diagnosis)


class SelectionError(FlowError, ValueError):
    """No candidate survived validation."""


class PlanningError(FlowError, RuntimeError):
    """Initial planning produced no usable workflow."""


class AllocationError(FlowError, ValueError):
    """A ready subtask could not be given an agent."""


class SimulationError(FlowError, ValueError):
    """Invalid reliability-simulation request."""


class LlmError(FlowError, RuntimeError):
    """Base class for provider failures."""


class LlmTransportError(LlmError):
    """Network failure or retryable status after all attempts."""


class LlmProtocolError(LlmError):
    """The provider answered with something that is not a chat completion."""


class LlmAuthError(LlmError):
    """The provider rejected the credentials."""


class LlmRequestError(LlmError):
    """The provider rejected the request (non-retryable 4xx)."""
