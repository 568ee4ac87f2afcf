"""Shared exception types.

Online-path code must never let these escape to a caller as an unhandled
failure: the gateway maps every small-path error to a large-model fallback
and every total failure to a service error with a retry hint.
"""


class FastcallError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FastcallError):
    """An operation precondition was violated by the caller."""


class DataError(FastcallError):
    """Input data is unreadable or structurally broken."""


class BackendUnavailableError(FastcallError):
    """A remote backend failed, timed out, or returned malformed data."""


class DegenerateCentroidError(FastcallError):
    """A weighted embedding sum collapsed to the zero vector."""


class FcParseError(FastcallError):
    """Backend output text is not a well-formed function-call object."""


class FcValidationError(FastcallError):
    """A function-call result does not satisfy the tool schema."""


class StubIncompleteError(FastcallError):
    """The slot-filling stub could not fill every required parameter."""


class MissingRecordsError(FastcallError):
    """An operation needs record bodies but got an id-only snapshot."""


class ServiceUnavailableError(FastcallError):
    """Neither the small path nor the large backend could answer."""

    def __init__(self, message: str, retry_after_s: float = 1.0):
        super().__init__(message)
        self.retry_after_s = retry_after_s
