"""Exception hierarchy.

Every error carries the CLI exit code of its class:
1 configuration, 2 input/output, 3 numeric, 4 non-convergence.
"""


class TradeCostError(Exception):
    exit_code = 3


class ConfigError(TradeCostError):
    exit_code = 1


class IoFailure(TradeCostError):
    exit_code = 2


class MissingInput(IoFailure):
    pass


class SchemaMismatch(IoFailure):
    pass


class InconsistentUnits(IoFailure):
    pass


class NumericError(TradeCostError):
    exit_code = 3


class ShapeMismatch(NumericError):
    pass


class UnbalancedMarginals(NumericError):
    pass


class NumericUnderflow(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class DegenerateRow(NumericError):
    pass


class EmptyPanel(NumericError):
    pass


class EmptyComparison(NumericError):
    pass


class DegenerateVariance(NumericError):
    pass


class AlignmentMismatch(NumericError):
    pass


class InsufficientSamples(NumericError):
    pass


class ZeroTotalOutput(NumericError):
    pass


class MissingCovariate(NumericError):
    def __init__(self, keys):
        self.keys = list(keys)
        shown = ", ".join(str(k) for k in self.keys[:10])
        more = "" if len(self.keys) <= 10 else f" (+{len(self.keys) - 10} more)"
        super().__init__(f"missing covariates for {len(self.keys)} keys: {shown}{more}")


class RankDeficient(NumericError):
    pass


class Separation(NumericError):
    def __init__(self, message, cells=()):
        self.cells = list(cells)
        super().__init__(message)


class NonConvergence(TradeCostError):
    exit_code = 4

    def __init__(self, message, iterations=None, residual=None):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message)
