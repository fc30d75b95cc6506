"""Exception hierarchy shared by every subsystem."""


class FedPeftError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(FedPeftError, ValueError):
    """Operand shapes do not satisfy an operation's algebraic rule."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(FedPeftError, RuntimeError):
    """A caller violated a precondition of an operation."""


class ConfigError(FedPeftError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(FedPeftError, ValueError):
    """Malformed or invalid input data."""


class ParseError(DataError):
    """A data file could not be parsed.  Carries the byte offset or line number."""

    def __init__(self, message, *, offset=None, line=None):
        self.offset = offset
        self.line = line
        where = ""
        if offset is not None:
            where = f" at byte offset {offset}"
        elif line is not None:
            where = f" at line {line}"
        super().__init__(message + where)


class DivergenceError(FedPeftError, ArithmeticError):
    """Training produced a non-finite loss."""
