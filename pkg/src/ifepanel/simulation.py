"""Data-generating processes, a Monte Carlo driver and reference quantities.

Every replication draws from its own counter-based substream of a single
root seed, so the aggregates do not depend on how replications are spread
over worker processes.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .ape import LinearVariance
from .bias import analytic_correction
from .estimator import FitOptions, FitResult, stationarity_norm, fit_ife
from .exceptions import IFEError
from .families import IndexFamily, Linear, Poisson, Probit
from .jackknife import jackknife_ape, jackknife_beta, jackknife_fits, make_split_plan
from .panel import Panel, drop_uninformative

log = logging.getLogger(__name__)

KINDS = ("linear_nonreg", "probit_static", "linear_static", "poisson_static")
DEFAULT_LAWS = {
    "linear_nonreg": "normal",
    "linear_static": "normal",
    "probit_static": "uniform:1,1.5",
    "poisson_static": "uniform:0.5,1",
}
ESTIMATORS = ("fe", "analytic", "jackknife")

# substream tags: spawn keys are (tag, rep)
_DATA, _EFFECTS, _PLAN = 0, 1, 2
_FIXED_REP = 2 ** 32


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``effect_law`` is ``"normal"`` (iid standard normal, values with
    ``|v| < 0.05`` redrawn), ``"uniform:a,b"`` or ``"default"`` (the
    per-kind choice in ``DEFAULT_LAWS``).  With ``fixed_effects`` the
    effects are drawn once and reused by every replication.
    """

    kind: str
    N: int
    T: int
    delta0: float = 1.0
    beta0: Tuple[float, ...] = (1.0,)
    effect_law: str = "default"
    seed: int = 0
    fixed_effects: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown DGP kind {self.kind!r}; expected one of {KINDS}")
        if self.N < 2 or self.T < 2:
            raise ValueError("N and T must be at least 2")
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")
        object.__setattr__(self, "beta0", tuple(float(b) for b in np.atleast_1d(self.beta0)))
        if self.kind != "linear_nonreg" and not self.beta0:
            raise ValueError(f"{self.kind} needs at least one coefficient")
        _parse_law(self.resolved_law)

    @property
    def resolved_law(self) -> str:
        return DEFAULT_LAWS[self.kind] if self.effect_law == "default" else self.effect_law

    @property
    def n_regressors(self) -> int:
        return 0 if self.kind == "linear_nonreg" else len(self.beta0)

    def family(self) -> IndexFamily:
        return {"probit_static": Probit, "poisson_static": Poisson}.get(self.kind, Linear)()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta0"] = list(self.beta0)
        d["effect_law"] = self.resolved_law
        return d


def _parse_law(law: str):
    head, _, rest = law.partition(":")
    if head == "normal" and not rest:
        return ("normal",)
    if head == "uniform":
        try:
            lo, hi = (float(v) for v in rest.split(","))
        except ValueError:
            raise ValueError(f"expected uniform:a,b, got {law!r}") from None
        if not lo < hi:
            raise ValueError(f"uniform law needs a < b, got {law!r}")
        return ("uniform", lo, hi)
    raise ValueError(f"unknown effect law {law!r}; expected 'normal' or 'uniform:a,b'")


def _draw_effect(rng, law, n):
    if law[0] == "uniform":
        return rng.uniform(law[1], law[2], n)
    v = rng.standard_normal(n)
    small = np.abs(v) < 0.05
    while small.any():
        v[small] = rng.standard_normal(int(small.sum()))
        small = np.abs(v) < 0.05
    return v


def _stream(seed: int, tag: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag, rep)))


@dataclass
class Truth:
    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    delta: Optional[float] = None


def dgp_generate(spec: DgpSpec, rep: int) -> Tuple[Panel, Truth]:
    """Panel and true parameters for replication ``rep`` (deterministic in ``(seed, rep)``)."""
    law = _parse_law(spec.resolved_law)
    N, T, K = spec.N, spec.T, spec.n_regressors
    er = _stream(spec.seed, _EFFECTS, _FIXED_REP if spec.fixed_effects else rep)
    alpha, gamma = _draw_effect(er, law, N), _draw_effect(er, law, T)
    rng = _stream(spec.seed, _DATA, rep)
    pi = np.outer(alpha, gamma)
    beta = np.asarray(spec.beta0 if K else (), dtype=float)
    x = rng.standard_normal((N, T, K))
    z = x @ beta + pi if K else pi
    if spec.kind == "linear_nonreg":
        y = pi + math.sqrt(spec.delta0) * rng.standard_normal((N, T))
        return Panel(y, x), Truth(alpha, gamma, beta, spec.delta0)
    if spec.kind == "linear_static":
        y = z + rng.standard_normal((N, T))
    elif spec.kind == "probit_static":
        y = (z >= rng.standard_normal((N, T))).astype(float)
    else:
        y = rng.poisson(np.exp(z)).astype(float)
    return Panel(y, x), Truth(alpha, gamma, beta)


@dataclass(frozen=True)
class ClosedFormRefs:
    """Reference values for the Gaussian model without regressors, relative to ``delta0``."""

    N: int
    T: int
    bias_factor: float
    V_NT: float
    V_A: float
    V_inf: float
    delta0: float = 1.0

    @property
    def sd_NT_rel(self) -> float:
        return math.sqrt(self.V_NT) / self.delta0

    @property
    def sd_A_rel(self) -> float:
        return math.sqrt(self.V_A) / self.delta0

    @property
    def sd_inf_rel(self) -> float:
        return math.sqrt(self.V_inf) / self.delta0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(sd_NT_rel=self.sd_NT_rel, sd_A_rel=self.sd_A_rel, sd_inf_rel=self.sd_inf_rel)
        return d


def closed_form_refs(N: int, T: int, delta0: float = 1.0) -> ClosedFormRefs:
    if N < 2 or T < 2:
        raise ValueError("N and T must be at least 2")
    nt = N * T
    V_NT = 2.0 * (N - 1) * (T - 1) * delta0 ** 2 / nt ** 2
    return ClosedFormRefs(
        N, T,
        bias_factor=-(1.0 / T + 1.0 / N),
        V_NT=V_NT,
        V_A=(1.0 + 1.0 / N + 1.0 / T) ** 2 * V_NT,
        V_inf=2.0 * delta0 ** 2 / nt,
        delta0=delta0,
    )


# ---------------------------------------------------------------------------
# one replication


@dataclass(frozen=True)
class McConfig:
    estimators: Tuple[str, ...] = ESTIMATORS
    ci_level: float = 0.95
    splits: int = 1
    trim: Optional[bool] = None
    options: FitOptions = FitOptions()


@dataclass
class RepRecord:
    rep: int
    ok: bool
    estimates: Dict[str, float] = field(default_factory=dict)
    hits: Dict[str, bool] = field(default_factory=dict)
    extra: Dict[str, float] = field(default_factory=dict)
    max_decrease: float = 0.0
    max_stationarity: float = 0.0
    error: str = ""


class _RepFailure(Exception):
    pass


def _audit(fits: Sequence[Tuple[Panel, FitResult]], family) -> Tuple[float, float]:
    dec, stat = 0.0, 0.0
    for p, f in fits:
        tr = np.asarray(f.objective_trace)
        if tr.size > 1:
            dec = max(dec, float(np.max(tr[:-1] - tr[1:])))
        stat = max(stat, stationarity_norm(p, family, f.params))
    return dec, stat


def _names(base: str, K: int) -> List[str]:
    return [base] if K <= 1 else [f"{base}[{k + 1}]" for k in range(K)]


def _one_rep(spec: DgpSpec, cfg: McConfig, rep: int) -> RepRecord:
    rec = RepRecord(rep, False)
    try:
        _fill(rec, spec, cfg, rep)
        rec.ok = True
    except (IFEError, ArithmeticError, _RepFailure, np.linalg.LinAlgError) as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
    return rec


def _fill(rec: RepRecord, spec: DgpSpec, cfg: McConfig, rep: int) -> None:
    family = spec.family()
    panel, truth = dgp_generate(spec, rep)
    trim = spec.kind == "probit_static" if cfg.trim is None else cfg.trim
    if trim:
        try:
            tr = drop_uninformative(panel)
        except ValueError as exc:
            raise _RepFailure(str(exc)) from None
        panel = tr.panel
        rec.extra["units_dropped"] = float(tr.n_units_dropped)
        rec.extra["periods_dropped"] = float(tr.n_periods_dropped)
    N, T, K = panel.shape
    fit = fit_ife(panel, family, cfg.options)
    if not fit.converged:
        raise _RepFailure(f"full-panel fit did not converge after {fit.outer_iterations} iterations")
    audited = [(panel, fit)]
    z = stats.norm.ppf(0.5 + cfg.ci_level / 2)
    jk = None
    if "jackknife" in cfg.estimators:
        seed = int(_stream(spec.seed, _PLAN, rep).integers(2 ** 63))
        plan = make_split_plan(N, T, cfg.splits, seed)
        jk = jackknife_fits(panel, family, plan, cfg.options, fit=fit, trim=trim)
        audited += [(s.panel, s.fit) for s in jk.time_halves]
        audited += [(s.panel, s.fit) for pair in jk.unit_halves for s in pair]

    if spec.kind == "linear_nonreg":
        d0 = spec.delta0
        spec_v = LinearVariance()
        d_hat = float(np.mean((panel.y - fit.params.pi) ** 2))
        est = {"fe": d_hat}
        if "analytic" in cfg.estimators:
            Bd, Dd = spec_v.closed_form_bias(d_hat)
            est["analytic"] = d_hat - Bd / T - Dd / N
        if jk is not None:
            est["jackknife"] = jackknife_ape(panel, family, spec_v, fits=jk)
        half = z * math.sqrt(2.0 / (N * T))
        for k, v in est.items():
            rec.estimates[k] = v
            rec.hits[k] = bool(v * (1 - half) <= d0 <= v * (1 + half))
    else:
        rep_a = analytic_correction(panel, family, fit, level=cfg.ci_level)
        se = np.sqrt(np.diag(np.linalg.inv(rep_a.W_hat)) / (N * T))
        vals = {"fe": fit.beta}
        if "analytic" in cfg.estimators:
            vals["analytic"] = rep_a.beta_corrected
        if jk is not None:
            vals["jackknife"] = jackknife_beta(panel, family, fits=jk)
        for k, v in vals.items():
            for j, name in enumerate(_names(k, K)):
                rec.estimates[name] = float(v[j])
                rec.hits[name] = bool(abs(v[j] - truth.beta[j]) <= z * se[j])
        for j, name in enumerate(_names("bias_T", K)):
            rec.extra[name] = float(rep_a.bias_T[j])
        for j, name in enumerate(_names("bias_N", K)):
            rec.extra[name] = float(rep_a.bias_N[j])
    rec.max_decrease, rec.max_stationarity = _audit(audited, family)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class EstimatorSummary:
    n: int
    mean: float
    mean_bias: float
    mean_bias_rel: float
    sd: float
    sd_rel: float
    coverage: float
    mc_se_mean: float

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in asdict(self).items()}


def _summarize(values: np.ndarray, hits: Optional[np.ndarray], target: float) -> EstimatorSummary:
    n = values.size
    if n == 0:
        nan = float("nan")
        return EstimatorSummary(0, nan, nan, nan, nan, nan, nan, nan)
    m = float(values.mean())
    sd = float(values.std(ddof=1)) if n > 1 else float("nan")
    scale = abs(target) if target else 1.0
    return EstimatorSummary(
        n, m, m - target, (m - target) / scale, sd, sd / scale,
        float(np.mean(hits)) if hits is not None and hits.size else float("nan"),
        sd / math.sqrt(n) if n > 1 else float("nan"),
    )


@dataclass
class McResult:
    spec: DgpSpec
    n_reps: int
    summaries: Dict[str, EstimatorSummary]
    extras: Dict[str, EstimatorSummary]
    closed_form: Optional[ClosedFormRefs]
    n_failures: int
    failures: List[Tuple[int, str]]
    ci_level: float
    max_decrease: float
    max_stationarity: float
    records: Optional[List[RepRecord]] = None

    @property
    def failure_rate(self) -> float:
        return self.n_failures / self.n_reps

    @property
    def valid(self) -> bool:
        return self.failure_rate <= 0.01

    def to_dict(self, include_records: bool = False) -> dict:
        out = {
            "spec": self.spec.to_dict(),
            "n_reps": self.n_reps,
            "n_failures": self.n_failures,
            "failure_rate": self.failure_rate,
            "valid": self.valid,
            "ci_level": self.ci_level,
            "summaries": {k: s.to_dict() for k, s in self.summaries.items()},
            "extras": {k: s.to_dict() for k, s in self.extras.items()},
            "closed_form": self.closed_form.to_dict() if self.closed_form else None,
            "max_objective_decrease": self.max_decrease,
            "max_stationarity": self.max_stationarity,
            "failures": [{"rep": r, "error": e} for r, e in self.failures],
        }
        if include_records and self.records is not None:
            out["records"] = [asdict(r) for r in self.records]
        return out


def _run_chunk(args):
    spec, cfg, reps = args
    return [_one_rep(spec, cfg, r) for r in reps]


def run_mc(spec: DgpSpec, n_reps: int = 2000, estimators: Sequence[str] = ESTIMATORS,
           ci_level: float = 0.95, splits: int = 1, workers: int = 1, trim: Optional[bool] = None,
           options: FitOptions = FitOptions(), keep_records: bool = False, min_reps: int = 100) -> McResult:
    """Monte Carlo study of the estimators in ``estimators``.

    A replication in which any requested estimator fails is recorded as a
    failure and left out of every summary, so all summaries are computed on
    the same replications.  The run is flagged invalid when more than 1% of
    the replications fail.

    Parameters
    ----------
    spec : DgpSpec
    n_reps : int
        Number of replications (at least ``min_reps``).
    estimators : sequence of {"fe", "analytic", "jackknife"}
    ci_level : float
    splits : int
        Unit partitions per replication for the jackknife.
    workers : int
        Worker processes; results are identical for any value.
    trim : bool, optional
        Drop units and periods without outcome variation before fitting
        (and inside every jackknife subpanel).  Defaults to on for probit.
    """
    if n_reps < min_reps:
        raise ValueError(f"n_reps must be at least {min_reps}")
    if not 0 < ci_level < 1:
        raise ValueError("ci_level must lie in (0, 1)")
    bad = set(estimators) - set(ESTIMATORS)
    if bad or not estimators:
        raise ValueError(f"unknown estimators {sorted(bad)}; choose from {ESTIMATORS}")
    est = tuple(e for e in ESTIMATORS if e in estimators)
    if "fe" not in est:
        est = ("fe",) + est
    cfg = McConfig(est, ci_level, splits, trim, options)
    reps = list(range(n_reps))
    if workers <= 1:
        records = [_one_rep(spec, cfg, r) for r in reps]
    else:
        size = max(1, math.ceil(n_reps / (4 * workers)))
        chunks = [(spec, cfg, reps[i:i + size]) for i in range(0, n_reps, size)]
        with ProcessPoolExecutor(workers) as ex:
            records = [r for part in ex.map(_run_chunk, chunks) for r in part]
    return aggregate(spec, records, ci_level, keep_records)


def aggregate(spec: DgpSpec, records: List[RepRecord], ci_level: float = 0.95,
              keep_records: bool = False) -> McResult:
    """Summaries over the successful replications, in replication order."""
    records = sorted(records, key=lambda r: r.rep)
    good = [r for r in records if r.ok]
    failures = [(r.rep, r.error) for r in records if not r.ok]
    if spec.kind == "linear_nonreg":
        targets = {"": spec.delta0}
    else:
        targets = dict(zip(_names("", len(spec.beta0)), spec.beta0))

    def target_for(name):
        return targets.get(name[name.find("["):] if "[" in name else "", 0.0)

    names = list(good[0].estimates) if good else []
    summaries = {
        n: _summarize(np.array([r.estimates[n] for r in good]), np.array([r.hits[n] for r in good]), target_for(n))
        for n in names
    }
    extra_names = list(good[0].extra) if good else []
    extras = {n: _summarize(np.array([r.extra[n] for r in good]), None, 0.0) for n in extra_names}
    return McResult(
        spec, len(records), summaries, extras,
        closed_form_refs(spec.N, spec.T, spec.delta0) if spec.kind == "linear_nonreg" else None,
        len(failures), failures, ci_level,
        max((r.max_decrease for r in good), default=0.0),
        max((r.max_stationarity for r in good), default=0.0),
        records if keep_records else None,
    )


# ---------------------------------------------------------------------------
# tables


def fmt2(x: Optional[float]) -> str:
    """Two decimals with the leading zero dropped (``-0.204 -> "-.20"``); ``NA`` if missing."""
    if x is None or not math.isfinite(x):
        return "NA"
    s = f"{x:.2f}"
    if s in ("-0.00", "0.00"):
        return ".00"
    return s.replace("0.", ".", 1) if s.lstrip("-").startswith("0.") else s


TABLE1_ROWS = (
    "(B_inf/T + D_inf/N)/delta0",
    "(delta_hat - delta0)/delta0",
    "(delta_A - delta0)/delta0",
    "(delta_J - delta0)/delta0",
    "sqrt(V_inf)/delta0",
    "sqrt(V_NT)/delta0",
    "sqrt(V_A)/delta0",
    "sqrt(V_J)/delta0",
)
TABLE1_MC_ROWS = ("sd(delta_hat)/delta0", "sd(delta_A)/delta0")
TABLE2_ROWS = ("CI(delta_hat)", "CI(delta_A)", "CI(delta_J)")


@dataclass
class RenderedTables:
    columns: List[str]
    table1: List[List[str]]
    table2: List[List[str]]
    row_labels1: List[str]
    row_labels2: List[str]

    def _csv(self, labels, rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic"] + self.columns)
        for lab, row in zip(labels, rows):
            w.writerow([lab] + row)
        return buf.getvalue()

    def _text(self, labels, rows) -> str:
        width = max(len(l) for l in labels)
        cw = max(8, max(len(c) for c in self.columns) + 1)
        lines = [" " * width + "".join(c.rjust(cw) for c in self.columns)]
        lines += [lab.ljust(width) + "".join(v.rjust(cw) for v in row) for lab, row in zip(labels, rows)]
        return "\n".join(lines) + "\n"

    @property
    def table1_csv(self) -> str:
        return self._csv(self.row_labels1, self.table1)

    @property
    def table2_csv(self) -> str:
        return self._csv(self.row_labels2, self.table2)

    @property
    def table1_text(self) -> str:
        return self._text(self.row_labels1, self.table1)

    @property
    def table2_text(self) -> str:
        return self._text(self.row_labels2, self.table2)


def _get(res: McResult, name: str, attr: str):
    s = res.summaries.get(name)
    return getattr(s, attr) if s is not None and s.n else None


def render_tables(results: Sequence[McResult], mc_dispersion: bool = False) -> RenderedTables:
    """Bias/dispersion and coverage tables, one column per ``(N, T)`` cell.

    Columns are ordered by ``N`` and then ``T``.  For the Gaussian model
    without regressors the rows follow the usual layout: closed-form bias
    factor, Monte Carlo mean relative biases, closed-form standard
    deviations and the Monte Carlo jackknife standard deviation (optionally
    followed by Monte Carlo standard deviations of the other two
    estimators).  Other designs get generic rows per estimator.
    """
    if not results:
        raise ValueError("render_tables needs at least one result")
    results = sorted(results, key=lambda r: (r.spec.N, r.spec.T))
    cols = [f"N={r.spec.N},T={r.spec.T}" for r in results]
    if all(r.spec.kind == "linear_nonreg" for r in results):
        labels1 = list(TABLE1_ROWS) + (list(TABLE1_MC_ROWS) if mc_dispersion else [])
        t1 = [[] for _ in labels1]
        t2 = [[] for _ in TABLE2_ROWS]
        for r in results:
            cf = r.closed_form
            col = [cf.bias_factor, _get(r, "fe", "mean_bias_rel"), _get(r, "analytic", "mean_bias_rel"),
                   _get(r, "jackknife", "mean_bias_rel"), cf.sd_inf_rel, cf.sd_NT_rel, cf.sd_A_rel,
                   _get(r, "jackknife", "sd_rel")]
            if mc_dispersion:
                col += [_get(r, "fe", "sd_rel"), _get(r, "analytic", "sd_rel")]
            for row, v in zip(t1, col):
                row.append(fmt2(v))
            for row, k in zip(t2, ("fe", "analytic", "jackknife")):
                row.append(fmt2(_get(r, k, "coverage")))
        return RenderedTables(cols, t1, t2, labels1, list(TABLE2_ROWS))
    names = []
    for r in results:
        names += [n for n in r.summaries if n not in names]
    labels1 = [f"{stat}({n})" for n in names for stat in ("bias", "sd")]
    t1 = [[fmt2(_get(r, n, a)) for r in results] for n in names for a in ("mean_bias", "sd")]
    labels2 = [f"CI({n})" for n in names]
    t2 = [[fmt2(_get(r, n, "coverage")) for r in results] for n in names]
    return RenderedTables(cols, t1, t2, labels1, labels2)
