"""Exception hierarchy shared across the engine."""


class SplatWorldError(Exception):
    """Base class for all engine errors."""


class DataError(SplatWorldError):
    """Input data is malformed or violates a precondition."""


class BehindCamera(DataError):
    pass


class InvalidDepth(DataError):
    pass


class NoValidPixels(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyMask(DataError):
    pass


class NoFrames(DataError):
    pass


class DegenerateInput(DataError):
    pass


class EmptyDepth(DataError):
    pass


class EmptySurface(DataError):
    pass


class NonFiniteState(SplatWorldError):
    """The dynamics stepper produced NaN or inf."""


class UnreachableTarget(SplatWorldError):
    pass


class EmptyActionList(DataError):
    pass


class IdMismatch(DataError):
    pass


class InvalidStep(DataError):
    pass


class ParseError(DataError):
    """A file could not be parsed; the message names the offending field or line."""

    def __init__(self, message, *, field=None, line=None):
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line


class UnknownField(ParseError):
    """A strict-mode document carries a field the schema does not define."""
