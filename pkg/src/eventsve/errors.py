"""Exception hierarchy. Each top-level class maps onto a CLI exit code."""


class EventSveError(Exception):
    exit_code = 1


class InputError(EventSveError):
    """Bad or missing input data."""

    exit_code = 2


class DimensionError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(InputError):
    pass


class InvariantError(EventSveError):
    """A domain invariant was violated. ``locus`` names the stage/pixel/event."""

    exit_code = 3

    def __init__(self, message, locus=None):
        if locus is not None:
            message = f"{message} [at {locus}]"
        super().__init__(message)
        self.locus = locus


class DegenerateObservationError(InvariantError):
    pass


class NumericError(EventSveError):
    exit_code = 4


class ProjectionError(NumericError):
    pass


class IllConditionedError(NumericError):
    pass
