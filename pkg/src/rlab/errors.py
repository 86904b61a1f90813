"""Exception types raised across the package."""


class RlabError(Exception):
    """Base class for package errors."""


class GridError(RlabError, ValueError):
    pass


class RepresentationMismatch(RlabError, ValueError):
    pass


class NonFiniteMultiplier(RlabError, ValueError):
    pass


class NearCharacteristicSingularity(RlabError, ArithmeticError):
    """Homogeneous weight blows up on the Fourier support of the input."""


class NonConvergence(RlabError, RuntimeError):
    pass


class PositivityViolation(RlabError, ValueError):
    pass


class Divergence(RlabError, RuntimeError):
    pass


class MaxIterExceeded(RlabError, RuntimeError):
    pass


class SupportViolation(RlabError, ValueError):
    pass


class ResolutionLoss(RlabError, ValueError):
    pass


class DomainViolation(RlabError, ValueError):
    pass


class ZeroDenominator(RlabError, ZeroDivisionError):
    pass


class RegimeViolation(RlabError, ValueError):
    pass


class InsufficientLevels(RlabError, ValueError):
    pass


class SeparationViolation(RlabError, ValueError):
    pass


class EmptyClass(RlabError, ValueError):
    pass


class EmptyTable(RlabError, ValueError):
    pass


class ConfigParse(RlabError, ValueError):
    """Bad experiment configuration; message names the key and line."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InvariantFailure(RlabError, AssertionError):
    """An experiment finished but one of its checks did not hold."""


class Unwritable(RlabError, OSError):
    pass
