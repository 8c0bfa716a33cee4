"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError/FormatError -> 3,
DivergenceError -> 4.
"""


class CloudgapError(Exception):
    """Base class for all package errors."""


class ConfigError(CloudgapError, ValueError):
    pass


class DataError(CloudgapError, ValueError):
    pass


class FormatError(DataError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FullyMaskedError(DataError):
    pass


class DivergenceError(CloudgapError, RuntimeError):
    def __init__(self, message: str, epoch: int, network: str | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.network = network
        self.batch = batch
