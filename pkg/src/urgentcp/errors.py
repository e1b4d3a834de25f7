"""Exception taxonomy shared by every control-plane component."""


class ControlPlaneError(Exception):
    """Base class for all errors raised by this package."""


class NotFound(ControlPlaneError):
    pass


class InvalidArgument(ControlPlaneError):
    pass


class InvalidState(ControlPlaneError):
    pass


class InvalidTransition(ControlPlaneError):
    """A status change that the transition table forbids (logic bug or stale poll)."""


class DeclMismatch(ControlPlaneError):
    """Queue re-declared with different properties."""


class InvalidAck(ControlPlaneError):
    """Ack/nack for a message that is not currently delivered-and-unacked."""


class RpcTimeout(ControlPlaneError):
    pass


class RecoveryError(ControlPlaneError):
    """Corrupt record found while replaying a queue log.

    Records before ``offset`` were recovered; the log was truncated there.
    """

    def __init__(self, queue: str, offset: int):
        super().__init__(f"corrupt log record in queue {queue!r} at byte offset {offset}")
        self.queue = queue
        self.offset = offset


class Unsupported(ControlPlaneError):
    pass


class ParseError(ControlPlaneError):
    """Scheduler output that could not be interpreted; carries the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class MachineUnreachable(ControlPlaneError):
    pass


class SubmitRejected(ControlPlaneError):
    """Scheduler refused the submit command; message carries its stderr."""


class PartialFetch(ControlPlaneError):
    """Some requested remote files were missing; lists both outcomes."""

    def __init__(self, ok: list, missing: list):
        super().__init__(f"fetched {len(ok)} of {len(ok) + len(missing)} files; missing: {missing}")
        self.ok = ok
        self.missing = missing


class TransferCorrupt(ControlPlaneError):
    """Digest mismatch after a machine-to-machine transfer (already retried once)."""


class StaleData(ControlPlaneError):
    pass


class NoData(ControlPlaneError):
    pass


class NoEligibleMachine(ControlPlaneError):
    pass


class CyclicWorkflow(ControlPlaneError):
    pass


class PredicateSyntax(ControlPlaneError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class MissingField(ControlPlaneError):
    def __init__(self, path: str):
        super().__init__(f"context has no field {path!r}")
        self.path = path


class TypeMismatch(ControlPlaneError):
    pass


class UnknownSensorType(ControlPlaneError):
    pass


class AlreadyRegistered(ControlPlaneError):
    pass
