"""Analytic bias correction for the common coefficients.

All conditional expectations are replaced by realised values at the
estimates, so every quantity here is a finite sum over the panel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .exceptions import DegenerateFactorError, SingularInformationError
from .families import IndexFamily
from .hessian import ProjectionResult, build_hessian, pseudoinverse, xi_residualize
from .panel import Panel


def _derivs(panel, family, fit, order=3):
    params = getattr(fit, "params", fit)
    d = family.derivatives(panel.y, params.index(panel), order)
    return params, d


def spectral_sum(d1: np.ndarray, other: np.ndarray, gamma: np.ndarray, L: int) -> np.ndarray:
    """``sum_{j=0}^{L} T/(T-j) sum_{t>j} gamma_t gamma_{t-j} d1_{i,t-j} other_{it...}`` per unit.

    ``other`` is (N, T) or (N, T, K); the result drops the time axis.
    """
    N, T = d1.shape
    if not 0 <= L < T:
        raise ValueError(f"trimming L must satisfy 0 <= L < T={T}, got {L}")
    extra = other.shape[2:]
    out = np.zeros((N,) + extra)
    for j in range(L + 1):
        lag = (gamma[j:] * gamma[: T - j])[None, :] * d1[:, : T - j]
        lag = lag.reshape(lag.shape + (1,) * len(extra))
        out += T / (T - j) * np.sum(lag * other[:, j:], axis=1)
    return out


def compute_W(panel: Panel, family: IndexFamily, fit, proj: ProjectionResult) -> np.ndarray:
    """``W = -(NT)^{-1} sum d2 l * Xt Xt'``; raises unless positive definite."""
    N, T, _ = panel.shape
    _, d = _derivs(panel, family, fit, 2)
    xt = proj.residual
    W = -np.einsum("it,itk,itl->kl", d.d2, xt, xt) / (N * T)
    W = 0.5 * (W + W.T)
    ev = np.linalg.eigvalsh(W)
    if not ev[0] > 1e-12 * max(abs(ev[-1]), 1e-300):
        raise SingularInformationError(f"W is not positive definite; eigenvalues {ev.tolist()}")
    return W


def compute_B(panel: Panel, family: IndexFamily, fit, proj: ProjectionResult, L: int = 0) -> np.ndarray:
    """Time-series (``1/T``) bias numerator averaged over units."""
    params, d = _derivs(panel, family, fit, 3)
    g = params.gamma
    xt = proj.residual
    num = spectral_sum(d.d1, d.d2[:, :, None] * xt, g, L)
    num += 0.5 * np.einsum("t,it,itk->ik", g * g, d.d3, xt)
    den = d.d2 @ (g * g)
    if np.any(den == 0):
        raise DegenerateFactorError(f"zero denominator for unit {int(np.argmax(den == 0))}")
    return -np.mean(num / den[:, None], axis=0)


def compute_D(panel: Panel, family: IndexFamily, fit, proj: ProjectionResult) -> np.ndarray:
    """Cross-section (``1/N``) bias numerator averaged over periods."""
    params, d = _derivs(panel, family, fit, 3)
    a2 = params.alpha ** 2
    xt = proj.residual
    num = np.einsum("i,it,itk->tk", a2, d.d1 * d.d2 + 0.5 * d.d3, xt)
    den = a2 @ d.d2
    if np.any(den == 0):
        raise DegenerateFactorError(f"zero denominator for period {int(np.argmax(den == 0))}")
    return -np.mean(num / den[:, None], axis=0)


def correct_beta_analytic(beta_hat, W, B, D, N: int, T: int) -> np.ndarray:
    """``beta - W^{-1} B / T - W^{-1} D / N``."""
    beta_hat = np.asarray(getattr(beta_hat, "beta", beta_hat), dtype=float)
    try:
        return beta_hat - np.linalg.solve(W, np.asarray(B) / T + np.asarray(D) / N)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError("W is singular") from exc


def beta_confidence_interval(beta_corrected, W, N: int, T: int, level: float = 0.95):
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    try:
        Winv = np.linalg.inv(W)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError("W is singular") from exc
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(np.diag(Winv) / (N * T))
    b = np.asarray(beta_corrected, dtype=float)
    return b - half, b + half


@dataclass
class CorrectionReport:
    beta_hat: np.ndarray
    W_hat: np.ndarray
    B_hat: np.ndarray
    D_hat: np.ndarray
    beta_corrected: np.ndarray
    trimming_L: int
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float

    @property
    def W_min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.W_hat)[0])

    @property
    def bias_T(self) -> np.ndarray:
        """``W^{-1} B``, the coefficient bias of order ``1/T``."""
        return np.linalg.solve(self.W_hat, self.B_hat)

    @property
    def bias_N(self) -> np.ndarray:
        return np.linalg.solve(self.W_hat, self.D_hat)

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "beta_corrected": self.beta_corrected.tolist(),
            "W": self.W_hat.tolist(),
            "W_min_eigenvalue": self.W_min_eigenvalue,
            "B": self.B_hat.tolist(),
            "D": self.D_hat.tolist(),
            "trim_L": self.trimming_L,
            "level": self.level,
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
        }


def analytic_correction(panel: Panel, family: IndexFamily, fit, L: int = 0, level: float = 0.95,
                        proj: Optional[ProjectionResult] = None) -> CorrectionReport:
    """Full pipeline: Hessian, pseudoinverse, projection, W/B/D and the corrected coefficients."""
    N, T, _ = panel.shape
    if proj is None:
        H = build_hessian(panel, family, fit)
        proj = xi_residualize(panel, family, fit, pseudoinverse(H), weights=H.weights)
    W = compute_W(panel, family, fit, proj)
    B = compute_B(panel, family, fit, proj, L)
    D = compute_D(panel, family, fit, proj)
    beta_hat = getattr(fit, "params", fit).beta
    bc = correct_beta_analytic(beta_hat, W, B, D, N, T)
    lo, hi = beta_confidence_interval(bc, W, N, T, level)
    return CorrectionReport(beta_hat.copy(), W, B, D, bc, L, lo, hi, level)
