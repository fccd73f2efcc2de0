"""Exception hierarchy shared by all subpackages."""


class SiflError(Exception):
    """Base class for every error raised by this package."""


class InputShapeError(SiflError, ValueError):
    pass


class IncompatibleArchitectureError(SiflError, ValueError):
    pass


class DegenerateWeightsError(SiflError, ValueError):
    pass


class EmptyDataError(SiflError, ValueError):
    pass


class MisalignedTargetsError(SiflError, ValueError):
    pass


class SourceTooSmallError(SiflError, ValueError):
    pass


class InsufficientPointsError(SiflError, ValueError):
    pass


class TargetTooLargeError(SiflError, ValueError):
    pass


class InvalidConfigError(SiflError, ValueError):
    """A configuration value is out of range or inconsistent.

    ``field`` names the offending key when known, so the CLI can report it.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class TooManyClientsError(SiflError, ValueError):
    pass


class RoundAbortedError(SiflError, RuntimeError):
    pass


class FormatError(SiflError, ValueError):
    """A binary container or checkpoint could not be parsed."""
