"""Exception taxonomy shared across the package.

Every error raised by loranmt derives from :class:`LoranmtError`, so callers
(and the CLI exit-code mapping) can distinguish our failures from stdlib ones.
"""


class LoranmtError(Exception):
    """Base class for all loranmt errors."""


class ShapeError(LoranmtError):
    """Operand shapes are incompatible for the requested operation."""


class UsageError(LoranmtError):
    """An API was called in a way its contract forbids."""


class ConfigError(LoranmtError):
    """A configuration value is invalid or inconsistent."""


class InputError(LoranmtError):
    """Runtime input data (token ids, text) violates a precondition."""


class CompatibilityError(LoranmtError):
    """Two artifacts (model/adapter/mixture) do not fit together."""


class TargetLookupError(LoranmtError, KeyError):
    """A named target or adapter id does not exist."""

    def __str__(self) -> str:  # KeyError quotes its arg; keep the message plain
        return Exception.__str__(self)


class FormatError(LoranmtError):
    """A serialized file is malformed; `offset` locates the problem."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(LoranmtError):
    """Training produced a non-finite loss; `history` holds the run so far."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history
