"""Exception hierarchy shared by all thermiq modules."""


class ThermiqError(Exception):
    """Base class for every error raised by thermiq."""


class InvalidArgument(ThermiqError, ValueError):
    pass


class ValidationError(ThermiqError, ValueError):
    pass


class ParseError(ValidationError):
    """Malformed input text. Carries the 1-based line number when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ConfigError(ValidationError):
    pass


class ThermalRunawayError(ThermiqError):
    """The leakage/temperature feedback loop has no fixed point."""

    def __init__(self, message, epoch=None, block=None):
        self.epoch = epoch
        self.block = block
        super().__init__(message)


class NumericalError(ThermiqError):
    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class IntegrityError(ThermiqError):
    """Trace files are truncated, misaligned or inconsistent with the floorplan."""


class InternalError(ThermiqError):
    pass
