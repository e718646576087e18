"""Exception hierarchy shared by all kronfisher modules."""


class KronfisherError(Exception):
    """Base class for all library errors."""


class DimensionError(KronfisherError):
    """Shapes of the operands are incompatible."""


class ValidationError(KronfisherError):
    """An input violates a documented precondition."""


class StateError(KronfisherError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(KronfisherError):
    """A file does not conform to its declared on-disk format."""


class ConvergenceError(KronfisherError):
    """An iterative solver exhausted its iteration budget."""


class DivergenceError(KronfisherError):
    """Training produced a non-finite loss or parameter."""
