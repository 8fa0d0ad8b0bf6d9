"""Exception hierarchy shared across the pipeline.

The CLI maps these onto process exit codes (2 config, 3 data, 4 numerical).
"""


class LndetError(Exception):
    exit_code = 1


class ConfigError(LndetError, ValueError):
    exit_code = 2


class DataError(LndetError):
    """Bad or inconsistent input data. ``field`` names the offending item."""

    exit_code = 3

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class MissingFileError(DataError):
    pass


class HeaderError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class CoregistrationError(DataError):
    pass


class AnnotationError(DataError):
    pass


class MissingModalityError(DataError):
    pass


class RangeError(DataError):
    pass


class NumericalFault(LndetError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class StageError(LndetError):
    """Wraps a failure inside one pipeline stage of an experiment run."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
