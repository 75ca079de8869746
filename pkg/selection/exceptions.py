"""
Error kinds raised by the selection services.

Every error carries the process exit code the management commands use when
it escapes a subcommand: 2 for malformed input or invalid settings, 3 for
dimension problems, 4 for numerical failures.
"""


class SelectionError(Exception):
    """Base class for all errors raised by the selection services."""

    exit_code = 4


class MalformedInput(SelectionError, ValueError):
    """Input file or flag value that cannot be parsed."""

    exit_code = 2


class InvalidHyper(SelectionError, ValueError):
    """Hyperparameter outside its admissible range."""

    exit_code = 2


class NonPositiveVariance(InvalidHyper):
    pass


class DomainError(SelectionError, ValueError):
    """Argument outside the domain of a function (e.g. a probability not in (0, 1))."""

    exit_code = 2


class DimensionMismatch(SelectionError, ValueError):
    exit_code = 3


class ConstantColumn(DimensionMismatch):
    pass


class TooLarge(SelectionError, ValueError):
    """Requested exhaustive computation exceeds its configured cap."""

    exit_code = 3


class NotFactorizable(SelectionError, ValueError):
    """Operation needs an independent-Bernoulli model prior."""


class WeightsNotNormalized(SelectionError, ValueError):
    pass


class NotBlockStructured(SelectionError, ValueError):
    """Meta-covariate matrix does not have exactly q unique, invertible rows."""


class NumericalError(SelectionError):
    exit_code = 4


class RankDeficient(NumericalError):
    def __init__(self, included, message=None):
        self.included = tuple(included)
        super().__init__(message or f"Design columns {self.included} are not of full column rank")


class RankDeficientZ(RankDeficient):
    def __init__(self, q, rank):
        self.q = q
        self.rank = rank
        super().__init__((), f"Meta-covariate matrix has rank {rank} < q = {q}")


class NoConvergence(NumericalError):
    def __init__(self, iterations, grad_norm):
        self.iterations = iterations
        self.grad_norm = grad_norm
        super().__init__(
            f"No convergence after {iterations} iterations (gradient norm {grad_norm:.3e})"
        )


class DegenerateVariance(NumericalError):
    pass
