"""Expected incidental-parameter Hessian, its pseudoinverse and the projections.

With weights ``h_it = -d2 l(Y_it, z_it)`` the Hessian of ``-L`` in
``phi = (alpha, gamma)`` has the arrow form

    H_aa = diag(sum_t gamma_t^2 h_it) / sqrt(NT)
    H_gg = diag(sum_i alpha_i^2 h_it) / sqrt(NT)
    H_ag[i, t] = alpha_i gamma_t h_it / sqrt(NT)

(score terms dropped, as in the expected Hessian).  ``v = (alpha, -gamma)``
spans its null space, so only the Moore-Penrose pseudoinverse exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .exceptions import ConcavityError, RankDeficiencyError
from .families import IndexFamily
from .panel import Panel

DENSE_LIMIT = 2000


@dataclass
class IncidentalHessian:
    block_aa: np.ndarray
    block_gg: np.ndarray
    block_ag: np.ndarray
    scale: float
    alpha: np.ndarray
    gamma: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.block_aa.size + self.block_gg.size

    def dense(self) -> np.ndarray:
        N = self.block_aa.size
        H = np.empty((self.size, self.size))
        H[:N, :N] = np.diag(self.block_aa)
        H[N:, N:] = np.diag(self.block_gg)
        H[:N, N:] = self.block_ag
        H[N:, :N] = self.block_ag.T
        return H

    def null_vector(self) -> np.ndarray:
        v = np.concatenate([self.alpha, -self.gamma])
        return v / np.linalg.norm(v)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        N = self.block_aa.size
        a, g = x[:N], x[N:]
        return np.concatenate([self.block_aa * a + self.block_ag @ g, self.block_ag.T @ a + self.block_gg * g])

    def spectrum(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.dense())


def curvature_weights(panel: Panel, family: IndexFamily, params) -> np.ndarray:
    """``h_it = -d2 l`` at the fitted index; raises if any entry is not positive."""
    z = params.index(panel)
    h = -family.derivatives(panel.y, z, 2).d2
    bad = ~(h > 0)
    if bad.any():
        i, t = map(int, np.argwhere(bad)[0])
        raise ConcavityError(
            f"non-positive curvature {h[i, t]!r} at (unit={panel.unit_labels[i]!r}, "
            f"time={panel.time_labels[t]!r}); the fitted index is outside the region of strict concavity"
        )
    return h


def hessian_from_weights(h: np.ndarray, alpha, gamma) -> IncidentalHessian:
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    N, T = h.shape
    s = 1.0 / np.sqrt(N * T)
    return IncidentalHessian(
        block_aa=s * (h @ (gamma * gamma)),
        block_gg=s * ((alpha * alpha) @ h),
        block_ag=s * (alpha[:, None] * h * gamma[None, :]),
        scale=s,
        alpha=alpha,
        gamma=gamma,
        weights=h,
    )


def build_hessian(panel: Panel, family: IndexFamily, fit) -> IncidentalHessian:
    """Expected incidental-parameter Hessian evaluated at a fit."""
    params = getattr(fit, "params", fit)
    return hessian_from_weights(curvature_weights(panel, family, params), params.alpha, params.gamma)


@dataclass
class PseudoInverseBlocks:
    """Blocks of the Moore-Penrose pseudoinverse ``P`` of the incidental Hessian.

    For large problems the blocks are materialised lazily; :meth:`apply`
    always works through the cheapest available route.
    """

    n_units: int
    n_periods: int
    _dense: Optional[np.ndarray] = None
    _solve: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    eigenvalues: Optional[np.ndarray] = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``P @ x`` for a vector or an (N+T, m) matrix."""
        if self._dense is not None:
            return self._dense @ x
        if x.ndim == 1:
            return self._solve(x)
        return np.column_stack([self._solve(c) for c in x.T])

    def matrix(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.apply(np.eye(self.n_units + self.n_periods))
        return self._dense

    @property
    def inv_aa(self):
        return self.matrix()[: self.n_units, : self.n_units]

    @property
    def inv_ag(self):
        return self.matrix()[: self.n_units, self.n_units:]

    @property
    def inv_ga(self):
        return self.matrix()[self.n_units:, : self.n_units]

    @property
    def inv_gg(self):
        return self.matrix()[self.n_units:, self.n_units:]


def _dense_pinv(H: IncidentalHessian, rtol: float) -> PseudoInverseBlocks:
    A = H.dense()
    w, V = np.linalg.eigh(A)
    cut = rtol * max(abs(w[-1]), 1e-300)
    small = np.abs(w) <= cut
    if small.sum() > 1:
        raise RankDeficiencyError(
            f"incidental Hessian has {int(small.sum())} near-zero eigenvalues (expected one); "
            "the factor is weak or the fit is degenerate"
        )
    inv = np.where(small, 0.0, 1.0 / np.where(small, 1.0, w))
    P = (V * inv) @ V.T
    P = 0.5 * (P + P.T)
    return PseudoInverseBlocks(H.block_aa.size, H.block_gg.size, _dense=P, eigenvalues=w)


def _schur_pinv(H: IncidentalHessian) -> PseudoInverseBlocks:
    """Action of P through a Schur complement on the shorter dimension.

    A particular solution of ``H x = b - (b'v)v`` is found by eliminating the
    longer diagonal block; the remaining singular system is made regular by
    adding ``c u u'`` along its known null vector ``u``.  Projecting the
    result orthogonally to ``v`` yields the minimum-norm solution.
    """
    N, T = H.block_aa.size, H.block_gg.size
    v = H.null_vector()
    swap = N < T
    if swap:
        Dl, Ds, C = H.block_gg, H.block_aa, H.block_ag.T  # eliminate gamma, keep alpha
        u = H.alpha / np.linalg.norm(H.alpha)
    else:
        Dl, Ds, C = H.block_aa, H.block_gg, H.block_ag
        u = H.gamma / np.linalg.norm(H.gamma)
    S = np.diag(Ds) - C.T @ (C / Dl[:, None])
    c = float(np.mean(Ds))
    S_reg = S + c * np.outer(u, u)
    chol = np.linalg.cholesky(0.5 * (S_reg + S_reg.T))

    def solve(b):
        b = b - (b @ v) * v
        bl, bs = (b[N:], b[:N]) if swap else (b[:N], b[N:])
        rhs = bs - C.T @ (bl / Dl)
        xs = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        xl = (bl - C @ xs) / Dl
        x = np.concatenate([xs, xl]) if swap else np.concatenate([xl, xs])
        return x - (x @ v) * v

    return PseudoInverseBlocks(N, T, _solve=solve)


def pseudoinverse(H: IncidentalHessian, rtol: float = 1e-10, method: str = "auto") -> PseudoInverseBlocks:
    """Moore-Penrose pseudoinverse of the incidental Hessian.

    ``method="dense"`` uses a symmetric eigendecomposition (eigenvalues below
    ``rtol`` times the largest are treated as zero, and more than one such
    eigenvalue is an error).  ``"schur"`` only provides the action of ``P``.
    ``"auto"`` picks dense up to ``N + T = 2000``.
    """
    if method == "auto":
        method = "dense" if H.size <= DENSE_LIMIT else "schur"
    if method == "dense":
        return _dense_pinv(H, rtol)
    if method == "schur":
        return _schur_pinv(H)
    raise ValueError(f"unknown pseudoinverse method {method!r}")


@dataclass
class ProjectionResult:
    projection: np.ndarray
    residual: np.ndarray
    star_alpha: np.ndarray
    star_gamma: np.ndarray


def _bilinear_project(c: np.ndarray, alpha, gamma, P: PseudoInverseBlocks) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``-(NT)^{-1/2} [gamma_t a_i + alpha_i g_t]`` with ``(a, g) = P (sum_t gamma c, sum_i alpha c)``.

    ``c`` is (N, T, m); returns the projection (N, T, m) and the
    coefficient vectors (N, m), (T, m).
    """
    N, T, m = c.shape
    u = np.einsum("itm,t->im", c, gamma)
    w = np.einsum("itm,i->tm", c, alpha)
    ag = P.apply(np.vstack([u, w]))
    s = -1.0 / np.sqrt(N * T)
    a_star, g_star = s * ag[:N], s * ag[N:]
    proj = a_star[:, None, :] * gamma[None, :, None] + alpha[:, None, None] * g_star[None, :, :]
    return proj, a_star, g_star


def xi_residualize(panel: Panel, family: IndexFamily, fit, P: PseudoInverseBlocks,
                   weights: Optional[np.ndarray] = None) -> ProjectionResult:
    """Projection of the regressors on the interactive tangent space and the residual ``X - Xi``."""
    params = getattr(fit, "params", fit)
    if panel.n_regressors < 1:
        raise ValueError("xi_residualize needs at least one regressor")
    h = curvature_weights(panel, family, params) if weights is None else weights
    c = -h[:, :, None] * panel.x
    proj, a_star, g_star = _bilinear_project(c, params.alpha, params.gamma, P)
    return ProjectionResult(proj, panel.x - proj, a_star, g_star)


def psi_projection(panel: Panel, family: IndexFamily, fit, P: PseudoInverseBlocks, dpi_delta) -> np.ndarray:
    """Same construction with ``d_pi Delta`` in place of ``d2 l * X``."""
    params = getattr(fit, "params", fit)
    dpi = np.asarray(dpi_delta, dtype=float)
    if dpi.shape != panel.y.shape:
        raise ValueError(f"dpi_delta has shape {dpi.shape}, expected {panel.y.shape}")
    proj, _, _ = _bilinear_project(dpi[:, :, None], params.alpha, params.gamma, P)
    return proj[:, :, 0]


def wls_projection(weights, target, alpha, gamma, tol: float = 1e-15) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted least squares fit of ``target`` by ``a_i gamma_t + alpha_i g_t``.

    Minimises ``sum w (target - a gamma' - alpha g')^2`` with a sparse
    LSMR solve.  The solution is unique up to ``a -> a + c alpha``,
    ``g -> g - c gamma``; the representative orthogonal to
    ``(alpha, -gamma)`` is returned.
    """
    w = np.asarray(weights, dtype=float)
    y = np.asarray(target, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    N, T = y.shape
    if w.shape != (N, T) or alpha.size != N or gamma.size != T:
        raise ValueError("weights, target, alpha and gamma have inconsistent shapes")
    if not np.all(w > 0):
        raise ValueError("wls_projection requires strictly positive weights")
    sw = np.sqrt(w).ravel()
    rows = np.arange(N * T)
    ii, tt = np.divmod(rows, T)
    A = sparse.csr_matrix(
        (
            np.concatenate([sw * gamma[tt], sw * alpha[ii]]),
            (np.concatenate([rows, rows]), np.concatenate([ii, N + tt])),
        ),
        shape=(N * T, N + T),
    )
    sol = splinalg.lsmr(A, sw * y.ravel(), atol=tol, btol=tol, conlim=1e12, maxiter=50 * (N + T))[0]
    v = np.concatenate([alpha, -gamma])
    sol = sol - (sol @ v) / (v @ v) * v
    return sol[:N], sol[N:]
