"""Exception types shared across the package."""


class DomainError(ValueError):
    """A parameter or instance lies outside its admissible domain."""


class NumericalError(ArithmeticError):
    """An iteration produced non-finite values."""


class GeometryError(RuntimeError):
    """The interpolation set is singular or too ill-conditioned to fit a model."""


class CertificationError(RuntimeError):
    """A lower-level solve hit its iteration safeguard before reaching the requested accuracy."""
