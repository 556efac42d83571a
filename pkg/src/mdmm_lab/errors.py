"""Exception hierarchy shared across the package."""


class MdmmLabError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteValue(MdmmLabError, ValueError):
    pass


class DimensionMismatch(MdmmLabError, ValueError):
    pass


class MultiplierDivergence(MdmmLabError, ArithmeticError):
    """The Lagrange multiplier left the admissible band."""

    def __init__(self, value, step=None):
        self.value = value
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"multiplier diverged{where}: |lambda| = {abs(value):.6g} > 1e6")


class BackwardBeforeForward(MdmmLabError, RuntimeError):
    pass


class EmptyBatch(MdmmLabError, ValueError):
    pass


class InvalidTarget(MdmmLabError, ValueError):
    pass


class DivergedRun(MdmmLabError, RuntimeError):
    pass


class ConfigError(MdmmLabError, ValueError):
    pass
