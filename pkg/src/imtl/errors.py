"""Error taxonomy shared across the package.

ConfigError covers anything a user can fix by editing flags, config files or
dataset dimensions. NumericError covers non-finite values discovered mid-run.
DatasetFormatError carries the byte offset of the first offending character so
CLI users can locate problems in large CSV files.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad dims, unknown keys, out-of-range values."""


class NumericError(ArithmeticError):
    """Non-finite loss or gradient encountered; the run must abort."""


class InternalError(RuntimeError):
    """A contract between modules was violated (stale cache, bad state)."""


class DatasetFormatError(ConfigError):
    """Malformed dataset file.

    Attributes:
        byte_offset: position of the first byte of the offending line.
        line_no: 1-based line number, if known.
    """

    def __init__(self, message, byte_offset=None, line_no=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset
        self.line_no = line_no
