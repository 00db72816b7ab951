"""Rank-1 least-squares factorisation by power iteration.

For the Gaussian model without regressors the maximum likelihood effects are
the leading singular pair of ``Y``.  This module computes it without going
through the alternating estimator, so the two can check each other.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimator import FitOptions, fit_ife
from .families import Linear
from .panel import Panel

log = logging.getLogger(__name__)


@dataclass
class Rank1Fit:
    alpha: np.ndarray
    gamma: np.ndarray
    sse: float
    iterations: int
    sigma1: float
    sigma2: float
    ambiguous: bool = False
    converged: bool = True

    @property
    def pi(self) -> np.ndarray:
        return np.outer(self.alpha, self.gamma)


def _power(G: np.ndarray, v: np.ndarray, tol: float, max_iter: int):
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = G @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return v, 0.0, it, True
        w /= lam
        # align signs before measuring the change
        if w @ v < 0:
            w = -w
        step = float(np.max(np.abs(w - v)))
        v = w
        if step < tol:
            return v, lam, it, True
    return v, lam, max_iter, False


def rank1_fit(Y, tol: float = 1e-13, max_iter: Optional[int] = None, seed: int = 12345) -> Rank1Fit:
    """Best rank-1 approximation ``alpha gamma'`` of ``Y`` in Frobenius norm.

    Power iteration runs on the smaller Gram matrix from a seeded random
    start until the iterate moves less than ``tol`` (sup norm).  A second,
    deflated run estimates the next singular value; when the two agree to
    within ``sqrt(tol)`` relative the leading direction is not identified and
    the result is flagged ``ambiguous`` (a warning is issued).
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or not np.any(Y != 0):
        raise ValueError("rank1_fit needs a nonzero matrix")
    N, T = Y.shape
    if max_iter is None:
        max_iter = max(int(10 * np.log(N * T)) + 1, 100000)
    left = N <= T
    G = Y @ Y.T if left else Y.T @ Y
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(G.shape[0])
    v, lam1, it, ok = _power(G, v0 / np.linalg.norm(v0), tol, max_iter)
    # deflated run for the second eigenvalue (few sweeps suffice for a tie check)
    G2 = G - lam1 * np.outer(v, v)
    u0 = rng.standard_normal(G.shape[0])
    _, lam2, _, _ = _power(G2, u0 / np.linalg.norm(u0), 1e-8, 2000)
    s1, s2 = np.sqrt(max(lam1, 0.0)), np.sqrt(max(lam2, 0.0))
    if left:
        u = v
        w = Y.T @ u / s1 if s1 > 0 else np.zeros(T)
    else:
        w = v
        u = Y @ w / s1 if s1 > 0 else np.zeros(N)
    alpha, gamma = np.sqrt(s1) * u, np.sqrt(s1) * w
    if gamma.sum() < 0:
        alpha, gamma = -alpha, -gamma
    ambiguous = s1 > 0 and (s1 - s2) <= np.sqrt(tol) * s1
    if ambiguous:
        warnings.warn("top two singular values coincide; the rank-1 factor is not unique", RuntimeWarning)
    resid = Y - np.outer(alpha, gamma)
    return Rank1Fit(alpha, gamma, float(np.sum(resid * resid)), it, float(s1), float(s2), bool(ambiguous), ok)


@dataclass
class OracleComparison:
    max_product_diff: float
    delta_diff: float
    delta_ife: float
    delta_pca: float
    objective_ife: float
    objective_pca: float
    ife_converged: bool

    @property
    def max_discrepancy(self) -> float:
        return max(self.max_product_diff, self.delta_diff)

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in self.__dict__.items()}


def compare_with_ife(panel: Panel, sigma: float = 1.0, options: FitOptions = FitOptions()) -> OracleComparison:
    """Fit the Gaussian model both ways and report the discrepancies."""
    if panel.n_regressors != 0:
        raise ValueError("the rank-1 oracle applies to panels without regressors")
    fam = Linear(sigma)
    fit = fit_ife(panel, fam, options)
    pca = rank1_fit(panel.y)
    N, T = panel.y.shape
    pi_ife = fit.params.pi
    d_ife = float(np.mean((panel.y - pi_ife) ** 2))
    d_pca = pca.sse / (N * T)
    scale = np.sqrt(N * T)
    obj_pca = float(np.sum(fam.loglik(panel.y, pca.pi)) / scale)
    return OracleComparison(
        float(np.max(np.abs(pi_ife - pca.pi))), abs(d_ife - d_pca), d_ife, d_pca, fit.loglik, obj_pca, fit.converged
    )
