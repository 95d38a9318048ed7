"""Exception hierarchy shared by every stage of the pipeline."""


class XbarError(Exception):
    """Base class for all package errors."""


class TopologyError(XbarError):
    """A layer specification cannot be compiled onto 256x256 cores."""


class DataError(XbarError):
    """Problems reading or interpreting input data files."""


class WrongMagicError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class ShortReadError(DataError):
    pass


class NetworkFileError(XbarError):
    """Base class for network/checkpoint file problems."""


class ParseError(NetworkFileError):
    """File is truncated or not valid JSON."""


class VersionMismatchError(NetworkFileError):
    pass


class SchemaViolationError(NetworkFileError):
    pass


class ChecksumMismatchError(NetworkFileError):
    pass


class NumericalError(XbarError):
    """A non-finite value appeared in a forward or backward pass."""


class DivergenceError(NumericalError):
    """Training loss became non-finite.

    ``last_good`` holds the run state from before the failing step.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ConfigError(XbarError):
    pass
