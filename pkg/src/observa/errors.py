"""Exception hierarchy shared by all observa modules.

Error class names mirror the failure contracts of the public API so callers
can catch exactly what an operation documents.
"""


class ObservaError(Exception):
    """Base class for every error raised by this package."""


class DegenerateInput(ObservaError):
    """Not enough independent data to compute a result (e.g. a clock fit)."""


class UnsortedInput(ObservaError):
    """Sequence-ordered input was not sorted (sequence numbers decreased)."""


class OutOfRange(ObservaError):
    """A requested timestamp lies outside the observed data span."""


class ConnectionFailed(ObservaError):
    """TCP connect, handshake transport, or mid-stream socket failure."""


class HandshakeMismatch(ObservaError):
    """Remote stream descriptor does not match the locally expected one."""


class ParseError(ObservaError):
    """Malformed marker line, task script, or wire payload."""


class PolicyViolation(ObservaError):
    """Payload or metadata contains a key denied by the configured policy."""


class ValidationError(ObservaError):
    """Structurally valid input that violates a semantic constraint."""


class SinkFailure(ObservaError):
    """A chunk/marker sink raised or an overflow policy demanded an abort."""


class SequenceRegression(ObservaError):
    """Chunk appended with a sequence number not above the last written."""


class IoFailure(ObservaError):
    """Filesystem level failure while writing or finalizing a session."""


class UnknownStream(ObservaError):
    """Referenced stream_id is not part of the session."""


class CorruptSession(ObservaError):
    """Session container is structurally damaged or not finalized."""


class IntegrityFailure(ObservaError):
    """Stored digests do not reproduce over the session bytes."""


class BindFailure(ObservaError):
    """Simulator could not bind its listening endpoint(s)."""


class ConfigInvalid(ObservaError):
    """Simulator or CLI configuration is self-contradictory."""
