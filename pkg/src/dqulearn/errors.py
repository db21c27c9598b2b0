"""Exception hierarchy shared by every dqulearn module."""


class DQuLearnError(Exception):
    pass


class ShapeError(DQuLearnError, ValueError):
    pass


class RangeError(DQuLearnError, ValueError):
    pass


class ArgumentError(DQuLearnError, ValueError):
    pass


class CapacityError(DQuLearnError, ValueError):
    pass


class LayoutError(DQuLearnError, ValueError):
    pass


class GateIndexError(DQuLearnError, IndexError):
    pass


class DecodeError(DQuLearnError, ValueError):
    """Malformed serialized circuit; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ConfigError(DQuLearnError, ValueError):
    pass


class ConflictError(DQuLearnError):
    pass


class DuplicateInFlightError(DQuLearnError):
    pass


class IncompleteResultsError(DQuLearnError):
    pass


class TransportError(DQuLearnError, ConnectionError):
    pass


class JobError(DQuLearnError):
    pass


class ExecutionError(DQuLearnError):
    """A worker could not execute a circuit. ``code`` is sent on the wire."""

    def __init__(self, code, detail):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail
