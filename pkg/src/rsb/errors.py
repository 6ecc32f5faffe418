"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or out-of-range input (non-finite coordinates, bad shapes, negative sizes)."""


class GeometryError(ValueError):
    """A geometric query was made at a point where it is undefined."""


class DegenerateSegmentError(GeometryError):
    pass


class ToleranceError(GeometryError):
    pass


class SingularityError(ArithmeticError):
    pass


class NumericError(ArithmeticError):
    """Overflow guard tripped or a non-finite value appeared in a computation."""
