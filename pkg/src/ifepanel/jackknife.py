"""Double split-panel jackknife for coefficients and average partial effects.

``3 x_full - mean(x over the two time halves) - mean(x over the unit halves)``
where the unit halves are averaged over the partitions in a
:class:`SplitPlan`.  For odd ``T`` the two time halves share the middle
period.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .estimator import FitOptions, FitResult, Params, fit_ife, restrict
from .exceptions import ConvergenceError
from .families import IndexFamily
from .panel import Panel, drop_uninformative, subpanel


@dataclass(frozen=True)
class SplitPlan:
    """Time halves as 0-based ``(start, stop)`` pairs and unit partitions as index pairs."""

    n_units: int
    n_periods: int
    time_halves: Tuple[Tuple[int, int], Tuple[int, int]]
    cross_partitions: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    rng_seed: Optional[int] = None
    enumerated: bool = False

    @property
    def n_partitions(self) -> int:
        return len(self.cross_partitions)


def n_balanced_partitions(N: int) -> int:
    """Number of unordered splits of ``N`` units into halves of sizes ``floor(N/2)`` and ``ceil(N/2)``."""
    h = N // 2
    return comb(N, h) // 2 if N % 2 == 0 else comb(N, h)


def _canonical(first: Sequence[int], N: int) -> Tuple[np.ndarray, np.ndarray]:
    a = np.sort(np.asarray(first, dtype=int))
    b = np.setdiff1d(np.arange(N), a)
    return a, b


def make_split_plan(N: int, T: int, S: int = 20, seed: Optional[int] = 0) -> SplitPlan:
    """Time halves plus ``S`` balanced unit partitions.

    Partitions are drawn uniformly without replacement; when ``S`` is at
    least the number of distinct partitions they are all enumerated.
    """
    if N < 4 or T < 4:
        raise ValueError(f"the split-panel jackknife needs N >= 4 and T >= 4, got N={N}, T={T}")
    if S < 1:
        raise ValueError("S must be at least 1")
    h = (T + 1) // 2
    halves = ((0, h), (T - h, T))
    P = n_balanced_partitions(N)
    k = N // 2
    parts: List[Tuple[np.ndarray, np.ndarray]] = []
    if S >= P:
        for first in itertools.combinations(range(N), k):
            # for even N keep only the member of each complementary pair holding unit 0
            if N % 2 == 0 and 0 not in first:
                continue
            parts.append(_canonical(first, N))
        return SplitPlan(N, T, halves, tuple(parts), seed, True)
    rng = np.random.default_rng(seed)
    seen = set()
    while len(parts) < S:
        first = np.sort(rng.permutation(N)[:k])
        a, b = _canonical(first, N)
        key = tuple(a) if N % 2 or 0 in a else tuple(b)
        if key in seen:
            continue
        seen.add(key)
        parts.append((a, b))
    return SplitPlan(N, T, halves, tuple(parts), seed, False)


@dataclass
class SubFit:
    label: str
    panel: Panel
    fit: FitResult


@dataclass
class JackknifeFits:
    full: SubFit
    time_halves: List[SubFit]
    unit_halves: List[Tuple[SubFit, SubFit]] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)


def _fit_sub(panel: Panel, family, options, init: Optional[Params], label: str, trim: bool) -> SubFit:
    if trim:
        try:
            tr = drop_uninformative(panel)
        except ValueError as exc:
            raise ConvergenceError(f"subpanel {label}: {exc}") from None
        if init is not None:
            init = Params(init.beta, init.alpha[tr.kept_units], init.gamma[tr.kept_periods])
        panel = tr.panel
    try:
        fit = fit_ife(panel, family, options, init=init)
    except ConvergenceError as exc:
        raise ConvergenceError(f"subpanel {label}: {exc}") from None
    if not fit.converged:
        raise ConvergenceError(f"subpanel {label} did not converge after {fit.outer_iterations} iterations")
    return SubFit(label, panel, fit)


def jackknife_fits(panel: Panel, family: IndexFamily, plan: SplitPlan, options: FitOptions = FitOptions(),
                   fit: Optional[FitResult] = None, trim: bool = False, warm_start: bool = True,
                   skip_failed: bool = False) -> JackknifeFits:
    """Full-panel fit and every subpanel fit required by ``plan``.

    ``trim`` removes units and periods without outcome variation from every
    subpanel first (needed for binary outcomes).  Subfits are warm-started
    from the full-panel estimates unless ``warm_start`` is false.  With
    ``skip_failed`` a unit partition whose subfits fail is dropped (and
    listed in ``skipped``) as long as at least one partition survives;
    failing time halves always raise.
    """
    N, T, _ = panel.shape
    if (plan.n_units, plan.n_periods) != (N, T):
        raise ValueError(f"split plan is for {plan.n_units}x{plan.n_periods}, panel is {N}x{T}")
    if fit is None:
        full = _fit_sub(panel, family, options, None, "full", False)
    else:
        full = SubFit("full", panel, fit)
    p0 = full.fit.params

    def init_for(units, periods):
        return restrict(p0, units, periods) if warm_start else None

    halves = []
    for j, (a, b) in enumerate(plan.time_halves):
        sp = subpanel(panel, periods=(a, b))
        halves.append(_fit_sub(sp, family, options, init_for(None, (a, b)), f"periods[{a}:{b}]", trim))
    pairs, skipped = [], []
    last_error = None
    for s, (ua, ub) in enumerate(plan.cross_partitions):
        pair = []
        try:
            for tag, u in (("a", ua), ("b", ub)):
                sp = subpanel(panel, units=u)
                pair.append(_fit_sub(sp, family, options, init_for(u, None), f"partition {s}{tag}", trim))
        except ConvergenceError as exc:
            if not skip_failed:
                raise
            skipped.append(str(exc))
            last_error = exc
            continue
        pairs.append(tuple(pair))
    if not pairs:
        raise ConvergenceError(f"every unit partition failed; last error: {last_error}")
    return JackknifeFits(full, halves, pairs, skipped)


def combine(full, time_halves: Sequence, unit_pairs: Sequence[Tuple]) -> np.ndarray:
    """``3 full - mean(time halves) - mean over partitions of the pair means``."""
    full = np.asarray(full, dtype=float)
    t_avg = np.mean([np.asarray(x, dtype=float) for x in time_halves], axis=0)
    n_avg = np.mean([0.5 * (np.asarray(a, dtype=float) + np.asarray(b, dtype=float)) for a, b in unit_pairs], axis=0)
    return 3.0 * full - t_avg - n_avg


def jackknife_beta(panel: Panel, family: IndexFamily, options: FitOptions = FitOptions(),
                   plan: Optional[SplitPlan] = None, fit: Optional[FitResult] = None,
                   trim: bool = False, fits: Optional[JackknifeFits] = None) -> np.ndarray:
    """Split-panel jackknife corrected coefficients."""
    if fits is None:
        plan = plan or make_split_plan(panel.n_units, panel.n_periods)
        fits = jackknife_fits(panel, family, plan, options, fit, trim)
    return combine(
        fits.full.fit.beta,
        [h.fit.beta for h in fits.time_halves],
        [(a.fit.beta, b.fit.beta) for a, b in fits.unit_halves],
    )


def jackknife_ape(panel: Panel, family: IndexFamily, spec, options: FitOptions = FitOptions(),
                  plan: Optional[SplitPlan] = None, fit: Optional[FitResult] = None,
                  trim: bool = False, fits: Optional[JackknifeFits] = None) -> float:
    """Split-panel jackknife corrected APE; each subpanel uses its own estimates."""
    from .ape import effect_values

    if fits is None:
        plan = plan or make_split_plan(panel.n_units, panel.n_periods)
        fits = jackknife_fits(panel, family, plan, options, fit, trim)

    def ape(sf: SubFit) -> float:
        return float(np.mean(effect_values(sf.panel, family, spec, sf.fit.params).delta))

    return float(combine(
        ape(fits.full),
        [ape(h) for h in fits.time_halves],
        [(ape(a), ape(b)) for a, b in fits.unit_halves],
    ))
