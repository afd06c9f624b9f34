"""Exception and warning types raised across the package."""


class RecordTooShortError(ValueError):
    """The input/output record cannot hold the requested Hankel windows."""


class DegenerateProblemError(ValueError):
    """The data leave nothing to estimate (zero bounds, annihilated instruments...)."""


class InfeasibleCertificateError(ValueError):
    """The dual certificate constraints have no solution."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonConvergenceError(RuntimeError):
    """The robust filtering solve stopped at ``max_iter`` without converging."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class OrderSelectionError(ValueError):
    """No model order can be read off the singular value spectrum."""


class RankDeficientWarning(UserWarning):
    """A least-squares step fell back to the minimum-norm solution."""
