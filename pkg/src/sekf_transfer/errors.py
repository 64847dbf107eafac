"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class DivergenceError(FloatingPointError):
    """A simulation or prediction produced a non-finite state.

    Attributes
    ----------
    step : int or None
        Index of the integration step (or training step) where the
        non-finite value first appeared.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
