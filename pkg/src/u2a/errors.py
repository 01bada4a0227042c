"""Exception hierarchy.

CLI exit codes are attached to the classes so the front door can map any
failure to the documented contract (3 = format, 4 = numerical failure).
"""


class U2AError(Exception):
    exit_code = 1


class InvalidInputError(U2AError, ValueError):
    exit_code = 2


class ConfigError(U2AError, ValueError):
    exit_code = 2


class FormatError(U2AError, ValueError):
    exit_code = 3


class NumericalError(U2AError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericalError):
    def __init__(self, what, step, value=None):
        self.step = step
        self.value = value
        msg = f"{what} diverged at step {step}"
        if value is not None:
            msg += f" (value={value!r})"
        super().__init__(msg)


class SolverError(NumericalError):
    def __init__(self, msg, residual=None, iters=None):
        self.residual = residual
        self.iters = iters
        super().__init__(msg)


class PreconditionError(NumericalError):
    pass


class ExhaustedError(U2AError, LookupError):
    """No candidate left to select."""
