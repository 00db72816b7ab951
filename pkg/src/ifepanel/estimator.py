"""Alternating concave maximisation for interactive fixed effects.

The objective is ``L(beta, alpha, gamma) = (NT)^{-1/2} sum_it l(Y_it, z_it)``
with ``z_it = X_it' beta + alpha_i gamma_t``.  Given ``gamma`` the index is
linear in ``(beta, alpha)`` and given ``(beta, alpha)`` it is linear in
``gamma``, so each block update is a concave program.  Both block updates
share one Newton engine that exploits the arrow structure of the Hessian
(diagonal in the per-row effects, dense only in ``beta``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import optimize

from .exceptions import ConvergenceError, DegenerateFactorError, NoncolinearityError
from .families import IndexFamily, Linear
from .panel import Panel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Params:
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "gamma"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def pi(self) -> np.ndarray:
        return np.outer(self.alpha, self.gamma)

    def index(self, panel: Panel) -> np.ndarray:
        return panel.x @ self.beta + self.pi if self.beta.size else self.pi.copy()

    def flipped(self) -> "Params":
        return Params(self.beta, -self.alpha, -self.gamma)


@dataclass(frozen=True)
class FitOptions:
    """Controls for :func:`fit_ife`.

    ``tol`` bounds the objective increase of the last outer iteration and
    ``grad_tol`` the sup-norm of the time-effect gradient left after the
    final (beta, alpha) update; both must hold to declare convergence.
    """

    tol: float = 1e-8
    max_outer_iters: int = 5000
    newton_tol: float = 1e-10
    damping: float = 0.5
    grad_tol: float = 1e-8
    max_newton_iters: int = 200

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if not 0 < self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")
        if not self.newton_tol > 0 or not self.grad_tol > 0:
            raise ValueError("newton_tol and grad_tol must be positive")


@dataclass
class FitResult:
    params: Params
    loglik: float
    outer_iterations: int
    objective_trace: List[float]
    converged: bool
    grad_norm: float = float("nan")
    family: Optional[IndexFamily] = None
    shape: Tuple[int, int, int] = (0, 0, 0)

    @property
    def beta(self):
        return self.params.beta

    @property
    def alpha(self):
        return self.params.alpha

    @property
    def gamma(self):
        return self.params.gamma

    def to_dict(self) -> dict:
        return {
            "beta": self.params.beta.tolist(),
            "alpha": self.params.alpha.tolist(),
            "gamma": self.params.gamma.tolist(),
            "loglik": self.loglik,
            "iterations": self.outer_iterations,
            "converged": bool(self.converged),
            "grad_norm": self.grad_norm,
        }


def objective(panel: Panel, family: IndexFamily, params: Params) -> float:
    """``(NT)^{-1/2} sum_it l(Y_it, X_it' beta + alpha_i gamma_t)``."""
    N, T, K = panel.shape
    if params.alpha.size != N or params.gamma.size != T or params.beta.size != K:
        raise ValueError(f"parameter sizes {params.beta.size, params.alpha.size, params.gamma.size} "
                         f"do not match panel {K, N, T}")
    ll = family.loglik(panel.y, params.index(panel))
    return float(ll.sum() / np.sqrt(N * T))


def gradient(panel: Panel, family: IndexFamily, params: Params):
    """Gradients of the (unpenalised) objective in ``beta``, ``alpha``, ``gamma``."""
    N, T, _ = panel.shape
    d1 = family.derivatives(panel.y, params.index(panel), 1).d1 / np.sqrt(N * T)
    g_beta = np.einsum("it,itk->k", d1, panel.x)
    g_alpha = d1 @ params.gamma
    g_gamma = params.alpha @ d1
    return g_beta, g_alpha, g_gamma


def stationarity_norm(panel: Panel, family: IndexFamily, params: Params) -> float:
    """Sup-norm of the gradient with the scale direction ``(alpha, -gamma)`` projected out."""
    g_beta, g_alpha, g_gamma = gradient(panel, family, params)
    g_phi = np.concatenate([g_alpha, g_gamma])
    v = np.concatenate([params.alpha, -params.gamma])
    vv = v @ v
    if vv > 0:
        g_phi = g_phi - (g_phi @ v / vv) * v
    return float(np.max(np.abs(np.concatenate([g_beta, g_phi])))) if g_phi.size else 0.0


# ---------------------------------------------------------------------------
# Newton engine


def _row_fallback(family, y, off, fixed, s0, row):
    """Bracketing maximisation of a single concave row ``s -> sum_c l(y_c, off_c + s fixed_c)``."""

    def score(s):
        return float(np.sum(family._derivs(y, off + s * fixed, 1)[0] * fixed))

    lo = hi = float(s0) if np.isfinite(s0) else 0.0
    g0 = score(lo)
    if g0 == 0:
        return lo
    step = 1.0
    direction = 1.0 if g0 > 0 else -1.0
    for _ in range(80):
        hi = lo + direction * step
        gh = score(hi)
        if np.isfinite(gh) and np.sign(gh) != np.sign(g0):
            a, b = sorted((lo, hi))
            return optimize.brentq(score, a, b, xtol=1e-14, rtol=1e-14)
        if np.isfinite(gh):
            lo, g0 = hi, gh
        step *= 2.0
    raise ConvergenceError(f"no maximiser found for row {row} (effect diverges; outcome may be separated)")


def _arrow_newton(family, y, off, xr, fixed, beta, free, scale, tol, max_iter, damping, row_label="row"):
    """Maximise ``sum_rc l(y_rc, off_rc + xr_rc' beta + free_r fixed_c)`` over ``(beta, free)``.

    Returns the maximiser and the scaled sup-norm of the final gradient.
    With no ``beta`` block the rows decouple and the line search is run per
    row; otherwise a single backtracking search on the joint step is used.
    """
    R, C = y.shape
    K = xr.shape[2]
    beta = beta.astype(float).copy()
    free = free.astype(float).copy()
    fixed2 = fixed * fixed
    quadratic = isinstance(family, Linear)
    gnorm = np.inf

    def index(b, f):
        z = off + f[:, None] * fixed[None, :]
        return z + xr @ b if K else z

    z = index(beta, free)
    for it in range(max_iter):
        d1, d2 = family._derivs(y, z, 2)
        g_free = d1 @ fixed
        g_beta = np.einsum("rc,rck->k", d1, xr) if K else np.zeros(0)
        gnorm = max(np.max(np.abs(g_free), initial=0.0), np.max(np.abs(g_beta), initial=0.0)) / scale
        if gnorm < tol:
            break
        dfree = d2 @ fixed2
        if np.any(dfree >= 0):
            r = int(np.argmax(dfree >= 0))
            raise ConvergenceError(f"non-concave block at {row_label} {r}: zero factor loadings")
        if K:
            Bm = np.einsum("rc,rck->rk", d2 * fixed[None, :], xr)
            A = np.einsum("rc,rck,rcl->kl", d2, xr, xr)
            S = A - (Bm / dfree[:, None]).T @ Bm
            rhs = -g_beta + Bm.T @ (g_free / dfree)
            ev = np.linalg.eigvalsh(-0.5 * (S + S.T))
            # compare with the block before the effects are partialled out
            ref = max(float(np.max(np.abs(np.diag(A)))), 1e-300)
            if not ev[0] > 1e-10 * ref:
                raise NoncolinearityError(
                    "singular coefficient block after eliminating the unit effects; "
                    "a regressor is (nearly) spanned by the interactive effects"
                )
            step_b = np.linalg.solve(S, rhs)
            step_f = (-g_free - Bm @ step_b) / dfree
        else:
            step_b = np.zeros(0)
            step_f = -g_free / dfree

        if K == 0:
            f_old = family._loglik(y, z).sum(axis=1)
            bad = ~np.isfinite(step_f)
            # rows already at their optimum are left alone
            done = np.abs(g_free) / scale < tol
            step_f = np.where(bad | done, 0.0, step_f)
            slack = 1e-13 * (1.0 + np.abs(f_old))
            t = np.ones(R)
            cand = free + step_f
            for _ in range(60):
                zc = off + cand[:, None] * fixed[None, :]
                f_new = family._loglik(y, zc).sum(axis=1)
                ok = (f_new >= f_old - slack) & np.isfinite(f_new)
                if ok.all():
                    break
                t = np.where(ok, t, t * damping)
                cand = np.where(ok, cand, free + t * step_f)
            else:
                cand = np.where(ok, cand, free)
            for r in np.flatnonzero(bad):
                cand[r] = _row_fallback(family, y[r], off[r], fixed, free[r], f"{row_label} {r}")
            moved = np.max(np.abs(cand - free))
            free = cand
            z = index(beta, free)
            if quadratic and not bad.any():
                # one exact Newton step solves a quadratic program
                d1 = family._derivs(y, z, 1)[0]
                gnorm = np.max(np.abs(d1 @ fixed), initial=0.0) / scale
                break
            if moved == 0.0:
                break
        else:
            if not (np.all(np.isfinite(step_b)) and np.all(np.isfinite(step_f))):
                raise ConvergenceError("non-finite Newton step in the (beta, effects) block")
            f_old = family._loglik(y, z).sum()
            t = 1.0
            accepted = False
            for _ in range(60):
                bc, fc = beta + t * step_b, free + t * step_f
                zc = index(bc, fc)
                f_new = family._loglik(y, zc).sum()
                if np.isfinite(f_new) and f_new >= f_old - 1e-13 * (1.0 + abs(f_old)):
                    accepted = True
                    break
                t *= damping
            if not accepted:
                break
            beta, free, z = bc, fc, zc
            if quadratic and t == 1.0:
                d1 = family._derivs(y, z, 1)[0]
                g_free = d1 @ fixed
                g_beta = np.einsum("rc,rck->k", d1, xr)
                gnorm = max(np.max(np.abs(g_free)), np.max(np.abs(g_beta))) / scale
                break
    return beta, free, gnorm


def _empty_x(shape):
    return np.zeros(shape + (0,))


def _linear_gamma(panel, beta, alpha):
    resid = panel.y - panel.x @ beta if beta.size else panel.y
    return alpha @ resid / (alpha @ alpha)


def _linear_beta_alpha(panel, gamma):
    N, T, K = panel.shape
    gg = gamma @ gamma
    y = panel.y
    if K:
        # partial gamma out of every unit's time series, then pooled OLS for beta
        xg = np.einsum("itk,t->ik", panel.x, gamma) / gg
        yg = y @ gamma / gg
        xm = panel.x - xg[:, None, :] * gamma[None, :, None]
        ym = y - yg[:, None] * gamma[None, :]
        A = np.einsum("itk,itl->kl", xm, xm)
        ev = np.linalg.eigvalsh(A)
        ref = max(float(np.max(np.einsum("itk,itk->k", panel.x, panel.x))), 1e-300)
        if not ev[0] > 1e-10 * ref:
            raise NoncolinearityError(
                "singular coefficient block after eliminating the unit effects; "
                "a regressor is (nearly) spanned by the interactive effects"
            )
        beta = np.linalg.solve(A, np.einsum("itk,it->k", xm, ym))
        y = y - panel.x @ beta
    else:
        beta = np.zeros(0)
    return beta, y @ gamma / gg


def profile_gamma(panel: Panel, family: IndexFamily, beta, alpha, gamma_init=None,
                  options: FitOptions = FitOptions()) -> np.ndarray:
    """Step 1: maximise over the time effects with ``beta`` and ``alpha`` held fixed.

    The periods decouple, so this is T independent one-dimensional concave
    programs solved by safeguarded Newton (closed form for the linear family).
    """
    N, T, K = panel.shape
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if not np.any(alpha != 0):
        raise DegenerateFactorError("profile_gamma requires a nonzero alpha")
    if isinstance(family, Linear):
        return _linear_gamma(panel, beta, alpha)
    off = (panel.x @ beta).T if K else np.zeros((T, N))
    g0 = np.zeros(T) if gamma_init is None else np.asarray(gamma_init, dtype=float)
    _, gamma, _ = _arrow_newton(
        family, panel.y.T, off, _empty_x((T, N)), alpha, np.zeros(0), g0,
        np.sqrt(N * T), options.newton_tol, options.max_newton_iters, options.damping, "period",
    )
    return gamma


def profile_beta_alpha(panel: Panel, family: IndexFamily, gamma, init=None,
                       options: FitOptions = FitOptions()):
    """Step 2: joint maximisation over ``(beta, alpha)`` given ``gamma``."""
    N, T, K = panel.shape
    gamma = np.asarray(gamma, dtype=float)
    if not np.any(gamma != 0):
        raise DegenerateFactorError("profile_beta_alpha requires a nonzero gamma")
    if isinstance(family, Linear):
        return _linear_beta_alpha(panel, gamma)
    b0, a0 = (np.zeros(K), np.zeros(N)) if init is None else init
    beta, alpha, _ = _arrow_newton(
        family, panel.y, np.zeros((N, T)), panel.x, gamma, np.asarray(b0, float), np.asarray(a0, float),
        np.sqrt(N * T), options.newton_tol, options.max_newton_iters, options.damping, "unit",
    )
    return beta, alpha


def profile_alpha(panel: Panel, family: IndexFamily, beta, gamma, alpha_init=None,
                  options: FitOptions = FitOptions()) -> np.ndarray:
    """Unit-effect update with ``beta`` held fixed (used when re-profiling at a given beta)."""
    N, T, K = panel.shape
    off = panel.x @ np.asarray(beta, float) if K else np.zeros((N, T))
    if isinstance(family, Linear):
        gamma = np.asarray(gamma, float)
        return (panel.y - off) @ gamma / (gamma @ gamma)
    a0 = np.zeros(N) if alpha_init is None else np.asarray(alpha_init, float)
    _, alpha, _ = _arrow_newton(
        family, panel.y, off, _empty_x((N, T)), np.asarray(gamma, float), np.zeros(0), a0,
        np.sqrt(N * T), options.newton_tol, options.max_newton_iters, options.damping, "unit",
    )
    return alpha


def _initial_gamma(panel, family, options):
    """Iteration 0: additive-time-effect fit with ``alpha = 1_N``."""
    N, T, K = panel.shape
    beta, gamma, _ = _arrow_newton(
        family, panel.y.T, np.zeros((T, N)), panel.x.transpose(1, 0, 2), np.ones(N), np.zeros(K),
        np.zeros(T), np.sqrt(N * T), options.newton_tol, options.max_newton_iters, options.damping, "period",
    )
    return beta, gamma


def rescale_normalize(alpha, gamma):
    """Rescale so that ``sum alpha^2 == sum gamma^2`` keeping ``alpha_i gamma_t`` fixed."""
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    aa, gg = alpha @ alpha, gamma @ gamma
    if not (aa > 0 and gg > 0):
        raise DegenerateFactorError("cannot normalise a zero-norm factor vector")
    c = (gg / aa) ** 0.25
    return c * alpha, gamma / c


def _finalize(alpha, gamma):
    alpha, gamma = rescale_normalize(alpha, gamma)
    if gamma.sum() < 0:
        alpha, gamma = -alpha, -gamma
    return alpha, gamma


def _check_degenerate(alpha, gamma):
    if np.linalg.norm(alpha) < 1e-10 or np.linalg.norm(gamma) < 1e-10:
        raise DegenerateFactorError("estimated factor loadings collapsed to zero")


def _alternate(panel, family, beta, alpha, gamma, options, update_beta=True):
    N, T, K = panel.shape
    scale = np.sqrt(N * T)
    params = Params(beta, alpha, gamma)
    trace = [objective(panel, family, params)]
    converged = False
    gnorm = np.inf
    k = 0
    bound = getattr(family, "index_bound", None)
    for k in range(1, options.max_outer_iters + 1):
        try:
            gamma_new = profile_gamma(panel, family, beta, alpha, gamma, options)
            _check_degenerate(alpha, gamma_new)
            if update_beta:
                beta_new, alpha_new = profile_beta_alpha(panel, family, gamma_new, (beta, alpha), options)
            else:
                beta_new, alpha_new = beta, profile_alpha(panel, family, beta, gamma_new, alpha, options)
        except ConvergenceError:
            if bound is None:
                raise
            # curvature underflow: effects are running off to infinity
            log.warning("block update failed after %d iterations; the outcome looks separated", k)
            break
        beta, alpha, gamma = beta_new, alpha_new, gamma_new
        _check_degenerate(alpha, gamma)
        alpha, gamma = rescale_normalize(alpha, gamma)
        params = Params(beta, alpha, gamma)
        z = params.index(panel)
        ll, d1 = family._loglik(panel.y, z), family._derivs(panel.y, z, 1)[0]
        trace.append(float(ll.sum() / scale))
        gnorm = float(np.max(np.abs(alpha @ d1)) / scale)
        if bound is not None and np.max(np.abs(z)) > bound:
            log.warning("fitted index exceeds %g after %d iterations; "
                        "the outcome looks separated and the MLE may not exist", bound, k)
            break
        if trace[-1] - trace[-2] < options.tol and gnorm < options.grad_tol:
            converged = True
            break
    return beta, alpha, gamma, trace, converged, gnorm, k


def fit_ife(panel: Panel, family: IndexFamily, options: FitOptions = FitOptions(),
            init: Optional[Params] = None) -> FitResult:
    """Interactive fixed effects conditional MLE by alternating block maximisation.

    Parameters
    ----------
    panel : Panel
    family : IndexFamily
    options : FitOptions
    init : Params, optional
        Warm start.  When omitted the start is the additive-time-effect fit
        (``alpha = 1``) followed by a (beta, alpha) update.

    Returns
    -------
    FitResult
        Estimates normalised to ``sum alpha^2 == sum gamma^2`` with
        ``sum gamma >= 0``.  Non-convergence is reported through
        ``converged=False``, not raised.
    """
    family.check_support(panel.y)
    N, T, K = panel.shape
    if init is None:
        beta0, gamma0 = _initial_gamma(panel, family, options)
        if np.linalg.norm(gamma0) < 1e-10:
            raise DegenerateFactorError("initial time effects are zero; no factor signal in the data")
        beta, alpha = profile_beta_alpha(panel, family, gamma0, (beta0, np.ones(N)), options)
        gamma = gamma0
    else:
        beta, alpha, gamma = init.beta.copy(), init.alpha.copy(), init.gamma.copy()
        if beta.size != K or alpha.size != N or gamma.size != T:
            raise ValueError("warm-start parameters do not match the panel")
    _check_degenerate(alpha, gamma)
    beta, alpha, gamma, trace, converged, gnorm, k = _alternate(panel, family, beta, alpha, gamma, options)
    alpha, gamma = _finalize(alpha, gamma)
    params = Params(beta, alpha, gamma)
    if not converged:
        log.warning("fit_ife stopped after %d outer iterations without convergence", k)
    return FitResult(params, objective(panel, family, params), k, trace, converged, gnorm, family, panel.shape)


def profile_phi(panel: Panel, family: IndexFamily, beta, init: Params,
                options: FitOptions = FitOptions()) -> FitResult:
    """Re-profile the effects at a given ``beta`` (the concentrated-likelihood argmax)."""
    beta = np.asarray(beta, dtype=float)
    _, alpha, gamma, trace, converged, gnorm, k = _alternate(
        panel, family, beta, init.alpha.copy(), init.gamma.copy(), options, update_beta=False
    )
    alpha, gamma = _finalize(alpha, gamma)
    params = Params(beta, alpha, gamma)
    return FitResult(params, objective(panel, family, params), k, trace, converged, gnorm, family, panel.shape)


def restrict(params: Params, units=None, periods=None) -> Params:
    """Warm-start parameters for a subpanel."""
    a = params.alpha if units is None else params.alpha[np.asarray(list(units), dtype=int)]
    g = params.gamma
    if periods is not None:
        start, stop = (periods.start, periods.stop) if isinstance(periods, (range, slice)) else periods
        g = g[start:stop]
    return Params(params.beta.copy(), a.copy(), g.copy())
