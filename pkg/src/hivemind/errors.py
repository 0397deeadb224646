"""Exception taxonomy shared across the runtime.

Unrecoverable errors abort the enclosing transaction and surface as a
failure outcome; retryable errors cause the dispatcher to re-run the unit.
"""

from __future__ import annotations


class HivemindError(Exception):
    """Base class for all runtime errors."""


# --- storage engine ---


class EngineStopped(HivemindError):
    pass


class DuplicateTable(HivemindError):
    pass


class InvalidSchema(HivemindError):
    pass


class UnknownTable(HivemindError):
    pass


class InvalidStatement(HivemindError):
    pass


class ArityMismatch(HivemindError):
    pass


class AlreadyTerminated(HivemindError):
    pass


class WrongPartition(HivemindError):
    """Single-sited transaction touched rows it does not own. Aborts the txn."""


class ConstraintViolation(HivemindError):
    """Duplicate primary key on insert. Aborts the txn."""


# --- workflow model ---


class WorkflowError(HivemindError):
    pass


class CycleDetected(WorkflowError):
    pass


class MultipleSinks(WorkflowError):
    pass


class UnwiredInput(WorkflowError):
    pass


class UnknownName(WorkflowError):
    pass


class NotConnected(WorkflowError):
    pass


class OverlappingGroups(WorkflowError):
    pass


class UnknownNode(WorkflowError):
    pass


class GroupCreatesCycle(WorkflowError):
    pass


class SiteHintConflict(WorkflowError):
    pass


class StatementNotDeclared(WorkflowError):
    """A body executed a statement outside its declared set. Aborts the txn."""


# --- dispatcher ---


class UnknownWorkflow(HivemindError):
    pass


class InputMismatch(HivemindError):
    pass


class UnknownPort(HivemindError):
    pass


class RetryableUnitError(HivemindError):
    """Transient fault; the dispatcher retries the unit from scratch."""


class ServerUnavailable(HivemindError):
    pass


# --- tracing queries ---


class NoHistory(HivemindError):
    pass
