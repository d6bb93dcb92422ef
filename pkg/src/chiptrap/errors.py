"""Exception types shared across the package."""


class ChiptrapError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ChiptrapError):
    """Bad user input: unknown key, unit, malformed file, invalid run setup."""


class SingularityError(ChiptrapError):
    """Field evaluation requested too close to a filament."""

    def __init__(self, message, label=None, point=None):
        super().__init__(message)
        self.label = label
        self.point = point


class NoTrapError(ChiptrapError):
    """No trap minimum / field zero found for the given configuration."""


class UnphysicalTrapError(ChiptrapError):
    """Minimizer converged onto a wire or behind the chip plane."""


class SaddlePointError(ChiptrapError):
    """Stationary point has a negative curvature direction."""


class FitError(ChiptrapError):
    """Nonlinear fit failed to converge; carries the best-so-far result."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
