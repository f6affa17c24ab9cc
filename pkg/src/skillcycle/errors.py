"""Exception types shared across the package."""

from __future__ import annotations


class SkillcycleError(Exception):
    """Base class for all package errors."""


class StorageError(SkillcycleError):
    """A persistence operation failed (wraps the underlying OSError)."""


class NotFound(SkillcycleError):
    """A referenced record, subtask, or policy does not exist."""


class InvalidTransition(SkillcycleError):
    """A subtask status change violates the allowed state machine."""


class SchemaError(SkillcycleError):
    """A scenario, plan, or config file failed structural validation."""


class FramingError(SkillcycleError):
    """A wire line is not the canonical encoding of a valid message."""


class DuplicateTool(SkillcycleError):
    """A tool name is already registered."""


class DomainError(SkillcycleError):
    """A tool handler rejected the call; carries a wire error code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class ToolNotAllowed(SkillcycleError):
    """The agent's current role does not include the requested tool."""


class PreconditionError(SkillcycleError):
    """The environment is outside the policy's precondition region."""


class PolicyBusy(SkillcycleError):
    """A policy handle is already active."""


class PolicyNotActive(SkillcycleError):
    """The operation requires an active policy handle."""


class MismatchedPair(SkillcycleError):
    """Forward/inverse trajectories cannot form an entangled pair."""


class BudgetExceeded(SkillcycleError):
    """Collection attempt budget ran out; carries partial results."""

    def __init__(self, message: str, pairs=None, event_log=None):
        super().__init__(message)
        self.pairs = pairs if pairs is not None else []
        self.event_log = event_log


class BackendError(SkillcycleError):
    """A decision backend failed; callers must treat this as an escalation."""


class DegenerateConfig(SkillcycleError):
    """An accounting ratio has a zero denominator."""


class NumericalError(SkillcycleError):
    """Non-finite values encountered in numeric computation."""


class ShapeError(SkillcycleError):
    """Array arguments have incompatible shapes."""
