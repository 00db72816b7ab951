"""Single-index log-likelihood families and their index derivatives.

Every family exposes ``loglik(y, z)`` and ``derivatives(y, z, max_order)``
for the log density of ``y`` given the index ``z``, plus ``mean(z, order)``
for the conditional mean ``E[y | z]`` and its derivatives (used by the
average partial effects).  All methods broadcast over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .exceptions import DomainError

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class DerivativeBundle:
    """Value of the log-likelihood and its index derivatives.

    Entries above the requested order are ``None``.
    """

    value: np.ndarray
    d1: Optional[np.ndarray] = None
    d2: Optional[np.ndarray] = None
    d3: Optional[np.ndarray] = None
    d4: Optional[np.ndarray] = None

    def order(self, q: int) -> np.ndarray:
        return (self.value, self.d1, self.d2, self.d3, self.d4)[q]


class IndexFamily:
    """Base class; subclasses implement ``_loglik``, ``_derivs`` and ``_mean``."""

    name = "base"
    # |index| beyond which fitted probabilities are numerically 0/1; used to
    # stop the fit when the effects diverge under (quasi-)separation
    index_bound: Optional[float] = None

    def in_support(self, y) -> np.ndarray:
        raise NotImplementedError

    def check_support(self, y) -> None:
        y = np.asarray(y, dtype=float)
        ok = self.in_support(y)
        if not np.all(ok):
            bad = y[~ok].flat[0]
            raise DomainError(f"{self.spec_string()}: outcome value {bad!r} outside the family support")

    def loglik(self, y, z, check: bool = True) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if check:
            self.check_support(y)
        return self._loglik(y, z)

    def derivatives(self, y, z, max_order: int = 3, check: bool = True) -> DerivativeBundle:
        if not isinstance(max_order, (int, np.integer)) or not 1 <= max_order <= 4:
            raise ValueError(f"max_order must be an integer in 1..4, got {max_order!r}")
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if check:
            self.check_support(y)
        ds = self._derivs(y, z, int(max_order))
        ds = [np.broadcast_to(d, np.broadcast(y, z).shape).astype(float) for d in ds]
        ds += [None] * (4 - len(ds))
        return DerivativeBundle(self._loglik(y, z), *ds)

    def mean(self, z, order: int = 0) -> np.ndarray:
        """Derivative of order ``order`` (0..3) of ``E[y | z]`` in ``z``."""
        if order not in (0, 1, 2, 3):
            raise ValueError("mean derivative order must be 0..3")
        return self._mean(np.asarray(z, dtype=float), order)

    def spec_string(self) -> str:
        return self.name

    # subclasses
    def _loglik(self, y, z):
        raise NotImplementedError

    def _derivs(self, y, z, max_order):
        raise NotImplementedError

    def _mean(self, z, order):
        raise NotImplementedError


@dataclass(frozen=True)
class Linear(IndexFamily):
    """Gaussian linear model with known scale ``sigma``."""

    sigma: float = 1.0
    name: str = field(default="linear", init=False)

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"linear family requires sigma > 0, got {self.sigma!r}")

    def spec_string(self) -> str:
        return f"linear:sigma={self.sigma:g}"

    def in_support(self, y):
        return np.isfinite(y)

    def _loglik(self, y, z):
        s2 = self.sigma ** 2
        return -_LOG_SQRT_2PI - np.log(self.sigma) - 0.5 * (y - z) ** 2 / s2

    def _derivs(self, y, z, max_order):
        s2 = self.sigma ** 2
        out = [(y - z) / s2, np.full(np.shape(z), -1.0 / s2)]
        zero = np.zeros(np.broadcast(y, z).shape)
        return (out + [zero, zero])[:max_order]

    def _mean(self, z, order):
        if order == 0:
            return z.copy()
        return np.full(z.shape, 1.0 if order == 1 else 0.0)


def _probit_chain(x):
    """Derivatives of log Phi at x: (g, g', g'', g''', g'''')."""
    g = special.log_ndtr(x)
    # inverse Mills ratio phi/Phi, stable in the lower tail through log_ndtr
    a = np.exp(-0.5 * x * x - _LOG_SQRT_2PI - g)
    s = x + a
    a1 = -a * s
    a2 = -a1 * s - a * (1.0 + a1)
    a3 = -a2 * s - 2.0 * a1 * (1.0 + a1) - a * a2
    return g, a, a1, a2, a3


@dataclass(frozen=True)
class Probit(IndexFamily):
    name: str = field(default="probit", init=False)
    index_bound = 35.0

    def in_support(self, y):
        return (y == 0) | (y == 1)

    def _loglik(self, y, z):
        sgn = 2.0 * y - 1.0
        return special.log_ndtr(sgn * z)

    def _derivs(self, y, z, max_order):
        sgn = 2.0 * y - 1.0
        _, a, a1, a2, a3 = _probit_chain(sgn * z)
        # d^q/dz^q log Phi(s z) = s^q g^(q)(s z)
        return [sgn * a, a1, sgn * a2, a3][:max_order]

    def _mean(self, z, order):
        if order == 0:
            return special.ndtr(z)
        phi = np.exp(-0.5 * z * z - _LOG_SQRT_2PI)
        if order == 1:
            return phi
        if order == 2:
            return -z * phi
        return (z * z - 1.0) * phi


@dataclass(frozen=True)
class Logit(IndexFamily):
    name: str = field(default="logit", init=False)
    index_bound = 35.0

    def in_support(self, y):
        return (y == 0) | (y == 1)

    def _loglik(self, y, z):
        return y * z - np.logaddexp(0.0, z)

    def _derivs(self, y, z, max_order):
        lam = special.expit(z)
        p = lam * special.expit(-z)
        out = [y - lam, -p, -p * (1.0 - 2.0 * lam), -p * (1.0 - 6.0 * p)]
        return out[:max_order]

    def _mean(self, z, order):
        lam = special.expit(z)
        if order == 0:
            return lam
        p = lam * special.expit(-z)
        return (p, p * (1.0 - 2.0 * lam), p * (1.0 - 6.0 * p))[order - 1]


@dataclass(frozen=True)
class Poisson(IndexFamily):
    name: str = field(default="poisson", init=False)

    def in_support(self, y):
        return np.isfinite(y) & (y >= 0) & (np.floor(y) == y)

    def _loglik(self, y, z):
        return y * z - np.exp(z) - special.gammaln(y + 1.0)

    def _derivs(self, y, z, max_order):
        w = np.exp(z)
        return [y - w, -w, -w, -w][:max_order]

    def _mean(self, z, order):
        return np.exp(z)


def family_from_string(text: str) -> IndexFamily:
    """Parse ``"linear:sigma=<v>"``, ``"probit"``, ``"logit"`` or ``"poisson"``."""
    text = text.strip().lower()
    head, _, rest = text.partition(":")
    if head == "linear":
        sigma = 1.0
        if rest:
            key, _, val = rest.partition("=")
            if key.strip() != "sigma" or not val:
                raise ValueError(f"cannot parse linear family options {rest!r}")
            sigma = float(val)
        return Linear(sigma)
    if rest:
        raise ValueError(f"family {head!r} takes no options")
    table = {"probit": Probit, "logit": Logit, "poisson": Poisson}
    if head not in table:
        raise ValueError(f"unknown family {text!r}; expected linear[:sigma=v], probit, logit or poisson")
    return table[head]()


def eval_loglik(family: IndexFamily, y, z):
    out = family.loglik(y, z)
    return float(out) if np.ndim(out) == 0 else out


def eval_derivatives(family: IndexFamily, y, z, max_order: int = 4) -> DerivativeBundle:
    return family.derivatives(y, z, max_order)


@dataclass(frozen=True)
class ConcavityReport:
    min_curvature: float
    max_curvature: float
    n_points: int
    n_violations: int

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def check_concavity(family: IndexFamily, y_samples, z_grid) -> ConcavityReport:
    """Empirical bounds of ``-d2 loglik`` over all (y, z) pairs in the grid.

    A non-negative second derivative is counted as a violation rather than
    raised, so the report can be inspected for a whole design at once.
    """
    y = np.asarray(y_samples, dtype=float).ravel()
    z = np.asarray(z_grid, dtype=float).ravel()
    if y.size == 0 or z.size == 0:
        raise ValueError("concavity check needs a nonempty grid")
    curv = -family.derivatives(y[:, None], z[None, :], 2).d2
    return ConcavityReport(
        min_curvature=float(curv.min()),
        max_curvature=float(curv.max()),
        n_points=int(curv.size),
        n_violations=int(np.sum(~(curv > 0))),
    )
