"""Exception hierarchy.

Every error raised on purpose by the package derives from ``GpreBNError`` and
carries a ``details`` dict so callers (and the CLI) can report the offending
shapes, indices or field paths without parsing the message.
"""


class GpreBNError(Exception):
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class ShapeError(GpreBNError, ValueError):
    pass


class DegenerateBatchError(GpreBNError, ValueError):
    pass


class UninitializedStatsError(GpreBNError, RuntimeError):
    pass


class NumericalError(GpreBNError, ArithmeticError):
    exit_code = 3


class InvalidProbabilitiesError(GpreBNError, ValueError):
    pass


class CheckpointError(GpreBNError, IOError):
    exit_code = 4


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class DataFormatError(GpreBNError, ValueError):
    exit_code = 4


class LabelRangeError(DataFormatError):
    pass


class ConfigError(GpreBNError, ValueError):
    exit_code = 2
