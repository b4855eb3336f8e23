"""Exception types raised across the package."""


class InputError(ValueError):
    """Invalid argument: empty data, non-finite weight, bad parameter."""


class DegenerateError(ArithmeticError):
    """An estimate is undefined, e.g. a zero denominator or zero baseline."""


class DegenerateLabelError(ValueError):
    """Propensity fit requested on observations holding a single label class."""


class QuadratureError(RuntimeError):
    """Numerical integration failed to reach the requested tolerance."""
