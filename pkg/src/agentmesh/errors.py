"""Exception types shared across the package."""


class AgentMeshError(Exception):
    """Base class for all package-specific errors."""


class MessageValidationError(AgentMeshError):
    """A message failed envelope validation; carries the violation list."""

    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class UnknownEndpointError(AgentMeshError):
    """An operation referenced an endpoint that is not registered."""


class DuplicateTaskError(AgentMeshError):
    """A (task_id, rollout_index) pair was submitted twice."""


class WireProtocolError(AgentMeshError):
    """A frame on the stream transport could not be parsed."""


class TraceCorruptionError(AgentMeshError):
    """The trace log has an invalid record; `boundary` is the last good seq."""

    def __init__(self, message, boundary_seq, byte_offset):
        super().__init__(message)
        self.boundary_seq = boundary_seq
        self.byte_offset = byte_offset


class CoordinatorHaltedError(AgentMeshError):
    """The coordinator refused new work after a trace storage failure."""


class IncompleteGroupError(AgentMeshError):
    """A rollout group finished with missing rollout indices.

    Carries whatever was collected so callers can inspect partial results
    instead of silently truncating the group.
    """

    def __init__(self, task_id, missing, trajectories):
        super().__init__(
            f"group {task_id!r} incomplete: missing rollout indices {sorted(missing)}"
        )
        self.task_id = task_id
        self.missing = sorted(missing)
        self.trajectories = list(trajectories)
