"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed or inconsistent input (shapes, grids, parameters)."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalBlowupError(FloatingPointError):
    """A non-finite value appeared during an evaluation."""

    def __init__(self, message, step=None, dump_path=None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path
