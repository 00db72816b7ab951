"""Interactive fixed effects estimation for nonlinear panel single-index models."""

import logging

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConcavityError,
    ConvergenceError,
    DegenerateFactorError,
    DomainError,
    DuplicateCellError,
    IFEError,
    NoncolinearityError,
    PanelError,
    ParseError,
    RankDeficiencyError,
    SingularInformationError,
    UnbalancedPanelError,
)
from .families import IndexFamily, Linear, Logit, Poisson, Probit, family_from_string  # noqa: E402
from .panel import Panel, drop_uninformative, from_long, load_panel, panel_to_csv, subpanel, validate  # noqa: E402
from .estimator import FitOptions, FitResult, Params, fit_ife, profile_phi  # noqa: E402
from .hessian import build_hessian, pseudoinverse, psi_projection, wls_projection, xi_residualize  # noqa: E402
from .bias import analytic_correction  # noqa: E402
from .ape import BinaryDiff, ContinuousDeriv, LinearVariance, analyze_ape, effect_from_string, estimate_ape  # noqa: E402
from .jackknife import jackknife_ape, jackknife_beta, jackknife_fits, make_split_plan  # noqa: E402
from .oracle import compare_with_ife, rank1_fit  # noqa: E402
from .simulation import DgpSpec, closed_form_refs, dgp_generate, render_tables, run_mc  # noqa: E402

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [name for name in dir() if not name.startswith("_") and name != "logging"]
