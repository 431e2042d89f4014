"""Exception hierarchy shared by every latentmal module."""


class LatentmalError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LatentmalError, ValueError):
    """Array dimensions do not line up."""


class DomainError(LatentmalError, ValueError):
    """Argument outside the mathematical domain of a function."""


class PreconditionError(LatentmalError, ValueError):
    """Input violates a documented precondition."""


class ParseError(LatentmalError, ValueError):
    """Text input could not be parsed."""


class FormatError(LatentmalError, ValueError):
    """Binary file has a bad magic, version, digest or length."""


class IntegrityError(LatentmalError, ValueError):
    """Model parameters are non-finite and cannot be persisted."""


class UndefinedMetricError(LatentmalError, ValueError):
    """Metric is undefined for the given labels (e.g. AUC with one class)."""
