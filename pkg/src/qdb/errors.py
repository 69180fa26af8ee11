"""Exception hierarchy for the queue engine.

Every error carries a small integer ``code`` matching the wire protocol's
error codes, so the broker can map exceptions to error frames without a
translation table.
"""


class QdbError(Exception):
    """Base class for all engine errors."""

    code = 6  # internal


class NotFoundError(QdbError):
    code = 1


class AlreadyExistsError(QdbError):
    code = 2


class UnavailableError(QdbError):
    """Engine failed/closed, or queue not in a state that allows the operation."""

    code = 3


class EngineFailedError(UnavailableError):
    """The log hit an I/O error; the engine is latched read-only."""

    code = 3


class DeadlockTimeoutError(QdbError):
    """A lock wait exceeded its deadline; the transaction must abort."""

    code = 4


class UsageError(QdbError):
    code = 5


class StaleTransactionError(UsageError):
    """Operation attempted on a transaction that is no longer ACTIVE."""

    code = 5


class TriggerHandlerError(QdbError):
    """A SAME_TXN trigger handler raised; the firing transaction was aborted."""

    code = 6


class UnrecoverableLogError(QdbError):
    """Log corruption before already-committed work; recovery refuses to guess."""

    code = 6


class InternalError(QdbError):
    code = 6
