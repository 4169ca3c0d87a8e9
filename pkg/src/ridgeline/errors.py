"""Exception hierarchy shared across ridgeline modules."""


class RidgelineError(Exception):
    """Base class; every error raised deliberately by the package derives from it."""


class ConfigError(RidgelineError, ValueError):
    pass


class DimensionError(RidgelineError, ValueError):
    pass


class NumericalError(RidgelineError, ArithmeticError):
    """Numerical failure: non-finite values, failed factorizations, divergence."""


class NonFiniteError(NumericalError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FactorizationError(NumericalError):
    pass


class OrthogonalityError(NumericalError):
    def __init__(self, message, deviation):
        super().__init__(message)
        self.deviation = deviation


class ConvergenceError(NumericalError):
    def __init__(self, message, residual_norm=None, history=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.history = history or []


class DivergenceError(NumericalError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []
