"""Exception hierarchy. Each class maps to one CLI exit code."""


class MfpriceError(Exception):
    exit_code = 1


class ConfigError(MfpriceError):
    """Malformed configuration. ``path`` names the offending field."""

    exit_code = 2

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ValidationError(MfpriceError):
    """A model assumption is violated. ``rule`` is the validation rule id."""

    exit_code = 3

    def __init__(self, message, rule=""):
        self.rule = rule
        super().__init__(f"[{rule}] {message}" if rule else message)


class ModelError(ValidationError):
    """Volatility matrix is rank deficient or outside its eigenvalue bounds."""


class PreconditionError(ValidationError):
    pass


class NumericalError(MfpriceError):
    exit_code = 4


class StepSizeError(NumericalError):
    """|theta| * sqrt(dt) too large for the discrete scheme; refine the grid."""


class DivergenceError(NumericalError):
    def __init__(self, message, ratios=()):
        self.ratios = list(ratios)
        super().__init__(message)


class GridError(NumericalError):
    """Brute-force argmax hit the edge of the control grid."""


class OracleFailure(MfpriceError):
    exit_code = 5
