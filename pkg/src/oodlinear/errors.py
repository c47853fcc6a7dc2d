"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has the wrong rank or incompatible dimensions."""


class ConfigurationError(ValueError):
    """A config value is out of range or a required input is missing."""


class FormatError(ValueError):
    """A serialized container violates the format contract."""


class CorruptionError(FormatError):
    """A container is structurally damaged (truncated, bad magic, ...).

    Carries the byte offset at which the damage was detected so the
    message can point at the failing region of the file.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class InsufficientDataError(ValueError):
    """A sampling request asks for more records than a pool holds."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. one class empty)."""
