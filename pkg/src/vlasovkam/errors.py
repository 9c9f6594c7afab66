"""Exception hierarchy shared by all modules."""


class VlasovKamError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(VlasovKamError, ValueError):
    """A numeric parameter is outside its documented range."""


class ShapeError(VlasovKamError, ValueError):
    """Array arguments have incompatible lengths or shapes."""


class ConvergenceError(VlasovKamError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceError(VlasovKamError, FloatingPointError):
    """Time integration produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ScheduleError(VlasovKamError, ValueError):
    """A cohomology schedule violates one of its timetable inequalities."""


class ExtensionError(VlasovKamError, RuntimeError):
    """No single-point extension exists because concentration fails."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class DiffusionError(VlasovKamError, RuntimeError):
    """Windowed minimization could not satisfy the concentration conditions."""

    def __init__(self, message, window=None):
        super().__init__(message)
        self.window = window


class EstimateError(VlasovKamError, RuntimeError):
    """An empirical estimate hit its search cap."""
