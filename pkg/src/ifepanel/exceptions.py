"""Exception types raised by the estimation routines."""


class IFEError(Exception):
    """Base class for all package errors."""


class DomainError(IFEError, ValueError):
    """Outcome value outside the support of the likelihood family."""


class PanelError(IFEError, ValueError):
    """Malformed panel input (unbalanced, duplicated cells, bad fields)."""


class UnbalancedPanelError(PanelError):
    pass


class DuplicateCellError(PanelError):
    pass


class ParseError(PanelError):
    pass


class ConvergenceError(IFEError, RuntimeError):
    """An inner optimisation step failed to find a maximiser."""


class DegenerateFactorError(IFEError, ValueError):
    """Estimated factor loadings collapsed to (numerically) zero."""


class NoncolinearityError(IFEError, ArithmeticError):
    """Regressors are not identified separately from the interactive effect."""


class ConcavityError(IFEError, ArithmeticError):
    """Non-negative second index derivative where strict concavity is required."""


class RankDeficiencyError(IFEError, ArithmeticError):
    """Incidental-parameter Hessian has more than one null direction."""


class SingularInformationError(IFEError, ArithmeticError):
    """Estimated information matrix W is not positive definite."""
