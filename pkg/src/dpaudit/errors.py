"""Exception types raised by the auditing library."""


class AuditError(Exception):
    """Base class for all library-specific errors."""


class DimensionError(AuditError):
    """An array argument has the wrong shape or length."""


class DivergenceError(AuditError):
    """Training produced a non-finite parameter vector.

    Attributes:
        step: 1-based index of the update that diverged.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"parameters became non-finite at step {step}")


class ReplayMismatchError(AuditError):
    """Recomputing a recorded training step did not reproduce the checkpoint.

    Attributes:
        step: 1-based index of the step that failed to reproduce.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"replayed step {step} does not match the recorded checkpoint")


class AssignmentError(AuditError):
    """A canary IN/OUT assignment is missing, malformed, or inconsistent."""


class BudgetError(AuditError):
    """A guessing budget is out of range for the given canary or pair count."""


class FormatError(AuditError):
    """A serialized container or record is malformed.

    Attributes:
        offset: byte offset of the first malformed content, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
