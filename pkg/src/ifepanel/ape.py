"""Average partial effects, their analytic bias correction and standard errors.

An effect is a function ``Delta(y, x, beta, pi)`` of the data, the common
coefficients and the interactive effect ``pi = alpha_i gamma_t``.  Each
:class:`EffectSpec` supplies ``Delta`` and its derivatives in ``beta`` and
``pi``; the conditional mean ``m`` of the family enters through
``family.mean(z, order)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import stats

from .bias import analytic_correction, spectral_sum
from .estimator import FitOptions, Params, profile_phi
from .exceptions import DegenerateFactorError
from .families import IndexFamily
from .hessian import build_hessian, pseudoinverse, psi_projection, xi_residualize
from .panel import Panel


@dataclass(frozen=True)
class EffectValues:
    delta: np.ndarray
    d_beta: np.ndarray  # (N, T, K)
    d_pi: np.ndarray
    d_pi2: np.ndarray


class EffectSpec:
    """Base class for partial-effect definitions."""

    kind = "base"

    def evaluate(self, family: IndexFamily, y, x, beta, pi) -> EffectValues:
        raise NotImplementedError

    def closed_form_bias(self, delta_hat: float) -> Optional[Tuple[float, float]]:
        """Known ``(B, D)`` bias components, if the effect has them in closed form."""
        return None

    def describe(self) -> str:
        return self.kind


def _linear_part(x, beta):
    return x @ beta if beta.size else np.zeros(x.shape[:2])


@dataclass(frozen=True)
class BinaryDiff(EffectSpec):
    """``m(beta_k + x_{-k}'beta_{-k} + pi) - m(x_{-k}'beta_{-k} + pi)`` for a 0/1 regressor ``k``."""

    k: int
    kind: str = field(default="binary_diff", init=False)

    def evaluate(self, family, y, x, beta, pi):
        beta = np.asarray(beta, dtype=float)
        K = beta.size
        if not 0 <= self.k < K:
            raise ValueError(f"regressor index {self.k} out of range for K={K}")
        base = _linear_part(x, beta) - x[:, :, self.k] * beta[self.k] + pi
        z1, z0 = base + beta[self.k], base
        m1 = [family.mean(z1, q) for q in range(3)]
        m0 = [family.mean(z0, q) for q in range(3)]
        d_pi = m1[1] - m0[1]
        d_beta = x * d_pi[:, :, None]
        d_beta[:, :, self.k] = m1[1]
        return EffectValues(m1[0] - m0[0], d_beta, d_pi, m1[2] - m0[2])

    def describe(self):
        return f"binary:k={self.k + 1}"


@dataclass(frozen=True)
class ContinuousDeriv(EffectSpec):
    """``beta_k m'(x'beta + pi)``, the derivative of the conditional mean in regressor ``k``."""

    k: int
    kind: str = field(default="continuous_deriv", init=False)

    def evaluate(self, family, y, x, beta, pi):
        beta = np.asarray(beta, dtype=float)
        K = beta.size
        if not 0 <= self.k < K:
            raise ValueError(f"regressor index {self.k} out of range for K={K}")
        z = _linear_part(x, beta) + pi
        m1, m2, m3 = (family.mean(z, q) for q in (1, 2, 3))
        bk = beta[self.k]
        d_beta = bk * m2[:, :, None] * x
        d_beta[:, :, self.k] += m1
        return EffectValues(bk * m1, d_beta, bk * m2, bk * m3)

    def describe(self):
        return f"deriv:k={self.k + 1}"


@dataclass(frozen=True)
class LinearVariance(EffectSpec):
    """Squared residual ``(y - x'beta - pi)^2``; its average estimates the error variance.

    Because this effect depends on the outcome itself, the plug-in bias
    formulas miss the covariance between the residual and the estimated
    effect.  The exact leading bias is ``-delta`` in both dimensions, which
    :meth:`closed_form_bias` supplies.
    """

    kind: str = field(default="linear_variance", init=False)

    def evaluate(self, family, y, x, beta, pi):
        beta = np.asarray(beta, dtype=float)
        e = y - _linear_part(x, beta) - pi
        return EffectValues(e * e, -2.0 * e[:, :, None] * x, -2.0 * e, np.full(e.shape, 2.0))

    def closed_form_bias(self, delta_hat):
        return -delta_hat, -delta_hat

    def describe(self):
        return "variance"


def effect_from_string(text: str) -> EffectSpec:
    """Parse ``binary:k=<j>``, ``deriv:k=<j>`` (1-based regressor) or ``variance``."""
    text = text.strip().lower()
    head, _, rest = text.partition(":")
    if head == "variance":
        if rest:
            raise ValueError("variance effect takes no options")
        return LinearVariance()
    if head in ("binary", "deriv"):
        key, _, val = rest.partition("=")
        if key.strip() != "k" or not val.strip().isdigit() or int(val) < 1:
            raise ValueError(f"expected {head}:k=<positive integer>, got {text!r}")
        k = int(val) - 1
        return BinaryDiff(k) if head == "binary" else ContinuousDeriv(k)
    raise ValueError(f"unknown effect {text!r}; expected binary:k=j, deriv:k=j or variance")


def effect_values(panel: Panel, family: IndexFamily, spec: EffectSpec, params: Params) -> EffectValues:
    return spec.evaluate(family, panel.y, panel.x, params.beta, params.pi)


def estimate_ape(panel: Panel, family: IndexFamily, spec: EffectSpec, beta, fit=None, refit: bool = False,
                 options: FitOptions = FitOptions()) -> Tuple[float, Params]:
    """Average of ``Delta`` at ``beta`` and the effects of ``fit``.

    With ``refit`` the effects are re-profiled at ``beta`` first.  Returns
    the estimate and the parameters it was evaluated at.
    """
    if fit is None:
        raise ValueError("estimate_ape needs a fit (or Params) supplying the effects")
    params = getattr(fit, "params", fit)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if refit and beta.size:
        prof = profile_phi(panel, family, beta, params, options)
        if not prof.converged:
            from .exceptions import ConvergenceError

            raise ConvergenceError(f"re-profiling the effects at beta={beta.tolist()} did not converge")
        params = prof.params
    else:
        params = Params(beta, params.alpha, params.gamma)
    return float(np.mean(effect_values(panel, family, spec, params).delta)), params


def _unit_den(d2, gamma, label="unit"):
    den = d2 @ (gamma * gamma)
    if np.any(den == 0):
        raise DegenerateFactorError(f"zero denominator for {label} {int(np.argmax(den == 0))}")
    return den


def compute_B_delta(panel: Panel, family: IndexFamily, fit, spec: EffectSpec, psi, L: int = 0) -> float:
    params = getattr(fit, "params", fit)
    d = family.derivatives(panel.y, params.index(panel), 3)
    ev = effect_values(panel, family, spec, params)
    g = params.gamma
    den = _unit_den(d.d2, g)
    spec_term = spectral_sum(d.d1, d.d2 * psi, g, L)
    second = (ev.d_pi2 - d.d3 * psi) @ (g * g)
    return float(np.mean(spec_term / den) - 0.5 * np.mean(second / den))


def compute_D_delta(panel: Panel, family: IndexFamily, fit, spec: EffectSpec, psi) -> float:
    params = getattr(fit, "params", fit)
    d = family.derivatives(panel.y, params.index(panel), 3)
    ev = effect_values(panel, family, spec, params)
    a2 = params.alpha ** 2
    den = a2 @ d.d2
    if np.any(den == 0):
        raise DegenerateFactorError(f"zero denominator for period {int(np.argmax(den == 0))}")
    num = a2 @ (d.d1 * d.d2 * psi - 0.5 * ev.d_pi2 + 0.5 * d.d3 * psi)
    return float(np.mean(num / den))


def gamma_influence(panel, family, params, spec, psi, W) -> np.ndarray:
    """``Gamma_it = [mean d_beta Delta]' W^{-1} d1_it X_it - Psi_it d1_it``."""
    d1 = family.derivatives(panel.y, params.index(panel), 1).d1
    out = -psi * d1
    if panel.n_regressors:
        ev = effect_values(panel, family, spec, params)
        lin = np.linalg.solve(W, ev.d_beta.mean(axis=(0, 1)))
        out = out + d1 * (panel.x @ lin)
    return out


def variance_delta(panel: Panel, family: IndexFamily, fit, spec: EffectSpec, psi, W=None,
                   delta_hat: Optional[float] = None) -> float:
    """Squared standard error of the APE under cross-sectional and serial independence.

    Returns ``(N T)^{-2}`` times the sum of within-unit products, same-period
    cross-unit products and squared influence terms of the centred effects.
    """
    params = getattr(fit, "params", fit)
    N, T, K = panel.shape
    if K and W is None:
        raise ValueError("W is required when the model has regressors")
    dl = effect_values(panel, family, spec, params).delta
    dt = dl - (dl.mean() if delta_hat is None else delta_hat)
    within = np.sum(dt.sum(axis=1) ** 2)
    cross = np.sum(dt.sum(axis=0) ** 2) - np.sum(dt * dt)
    G = gamma_influence(panel, family, params, spec, psi, W if K else None)
    return float((within + cross + np.sum(G * G)) / (N * T) ** 2)


def correct_ape_analytic(delta_hat: float, B_delta: float, D_delta: float, N: int, T: int) -> float:
    return float(delta_hat - B_delta / T - D_delta / N)


@dataclass
class ApeReport:
    effect: str
    delta_hat: float
    B_delta: float
    D_delta: float
    V_delta: float
    delta_corrected: float
    se: float
    ci: Tuple[float, float]
    level: float
    beta_used: np.ndarray
    closed_form: bool = False
    regime: str = "independent"
    gamma_influence: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "effect": self.effect,
            "delta_hat": self.delta_hat,
            "B_delta": self.B_delta,
            "D_delta": self.D_delta,
            "V_delta": self.V_delta,
            "delta_corrected": self.delta_corrected,
            "se": self.se,
            "ci": [float(c) for c in self.ci],
            "level": self.level,
            "beta_used": np.asarray(self.beta_used).tolist(),
            "closed_form_bias": self.closed_form,
            "variance_regime": self.regime,
        }


def analyze_ape(panel: Panel, family: IndexFamily, fit, spec: EffectSpec, L: int = 0, level: float = 0.95,
                correct_beta: bool = True, options: FitOptions = FitOptions(),
                keep_influence: bool = False) -> ApeReport:
    """APE pipeline: correct beta, re-profile the effects, estimate and correct the APE.

    With ``correct_beta=False`` the APE is evaluated at the uncorrected fit.
    The CI is centred at the corrected estimate.
    """
    N, T, K = panel.shape
    W = None
    params = fit.params
    if K:
        rep = analytic_correction(panel, family, fit, L=L, level=level)
        W = rep.W_hat
        beta = rep.beta_corrected if correct_beta else params.beta
    else:
        beta = params.beta
    delta_hat, params = estimate_ape(panel, family, spec, beta, fit, refit=bool(K and correct_beta), options=options)
    H = build_hessian(panel, family, params)
    P = pseudoinverse(H)
    ev = effect_values(panel, family, spec, params)
    psi = psi_projection(panel, family, params, P, ev.d_pi)
    if K and correct_beta:
        # W at the re-profiled parameters, consistent with psi
        proj = xi_residualize(panel, family, params, P, weights=H.weights)
        W = analytic_correction(panel, family, params, L=L, level=level, proj=proj).W_hat
    closed = spec.closed_form_bias(delta_hat)
    if closed is not None:
        Bd, Dd = closed
    else:
        Bd = compute_B_delta(panel, family, params, spec, psi, L)
        Dd = compute_D_delta(panel, family, params, spec, psi)
    V = variance_delta(panel, family, params, spec, psi, W, delta_hat)
    corrected = correct_ape_analytic(delta_hat, Bd, Dd, N, T)
    se = float(np.sqrt(max(V, 0.0)))
    z = stats.norm.ppf(0.5 + level / 2)
    G = gamma_influence(panel, family, params, spec, psi, W) if keep_influence else None
    return ApeReport(spec.describe(), delta_hat, Bd, Dd, V, corrected, se, (corrected - z * se, corrected + z * se),
                     level, params.beta.copy(), closed is not None, "independent", G)
