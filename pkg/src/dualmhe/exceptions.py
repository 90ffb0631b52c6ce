"""Exception types raised across the package."""


class DualMHEError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DualMHEError, ValueError):
    pass


class NotPSD(DualMHEError, ValueError):
    def __init__(self, which, eigmin=None):
        self.which = which
        self.eigmin = eigmin
        msg = f"{which} is not positive semidefinite"
        if eigmin is not None:
            msg += f" (min eigenvalue {eigmin:.3e})"
        super().__init__(msg)


class NotPD(DualMHEError, ValueError):
    def __init__(self, which, eigmin=None):
        self.which = which
        self.eigmin = eigmin
        msg = f"{which} is not positive definite"
        if eigmin is not None:
            msg += f" (min eigenvalue {eigmin:.3e})"
        super().__init__(msg)


class NotObservable(DualMHEError, ValueError):
    pass


class SingularInnovation(DualMHEError, ArithmeticError):
    pass


class WindowLengthMismatch(DualMHEError, ValueError):
    pass


class SolverInfeasible(DualMHEError, RuntimeError):
    pass


class RiccatiNoConverge(DualMHEError, RuntimeError):
    pass


class UnknownEstimator(DualMHEError, KeyError):
    pass


class ConfigError(DualMHEError, ValueError):
    pass
