"""Exception hierarchy.

Every error raised on purpose by the package derives from ``PrevmapError``.
The CLI maps ``ValidationError`` subclasses to exit code 2 and
``NumericalError`` subclasses to exit code 3.
"""


class PrevmapError(Exception):
    pass


class ValidationError(PrevmapError, ValueError):
    pass


class NumericalError(PrevmapError, ArithmeticError):
    pass


class RasterParseError(ValidationError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DimensionError(ValidationError):
    def __init__(self, message, expected=None, found=None):
        super().__init__(message)
        self.expected = expected
        self.found = found


class CompatibilityError(ValidationError):
    pass


class BoundsError(ValidationError, IndexError):
    pass


class DomainError(ValidationError):
    pass


class PlacementError(ValidationError):
    pass


class UnreachablePixelError(ValidationError):
    pass


class PartitionError(ValidationError):
    pass


class ExtractionError(ValidationError):
    def __init__(self, message, sites=()):
        super().__init__(message)
        self.sites = list(sites)


class AggregationError(ValidationError):
    pass


class TestUndefinedError(ValidationError):
    __test__ = False  # not a pytest class


class OptimizationError(NumericalError):
    def __init__(self, message, grad_norm=None, trace=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.trace = trace or []


class FactorizationError(NumericalError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
