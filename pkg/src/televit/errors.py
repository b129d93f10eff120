"""Exception types shared across the package."""


class TeleViTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TeleViTError):
    """Array shapes or dimensions disagree with an operation's contract."""


class GraphError(TeleViTError):
    """Autodiff contract violation (e.g. backward on a non-scalar root)."""


class ConfigError(TeleViTError):
    """Invalid or inconsistent configuration."""


class DataError(TeleViTError):
    """Missing, malformed, or out-of-contract data."""


class MetricError(TeleViTError):
    """A metric is undefined for the given inputs (e.g. no positive labels)."""


class NumericsError(TeleViTError):
    """Non-finite values appeared where only finite values are allowed."""
