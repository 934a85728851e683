class InputError(ValueError):
    """Caller supplied data that violates an operation's preconditions."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values.

    ``trajectory`` carries the objective values recorded before the failure,
    when the error comes out of an optimization loop.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class StateError(RuntimeError):
    """An object is not in the state an operation needs (e.g. untrained)."""
