"""Balanced panel container, CSV ingestion and design diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .exceptions import DuplicateCellError, PanelError, ParseError, UnbalancedPanelError


@dataclass(frozen=True, eq=False)
class Panel:
    """Balanced N x T panel.

    Attributes
    ----------
    y : ndarray, shape (N, T)
        Outcomes.
    x : ndarray, shape (N, T, K)
        Regressors; ``K`` may be zero.
    unit_labels, time_labels : tuple
        Identifiers in storage order.  Time labels are strictly increasing.
    """

    y: np.ndarray
    x: np.ndarray
    unit_labels: tuple = ()
    time_labels: tuple = ()

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 2:
            raise ValueError(f"outcomes must be an N x T matrix, got shape {y.shape}")
        N, T = y.shape
        if N < 1 or T < 1:
            raise ValueError("panel must have at least one unit and one period")
        x = np.zeros((N, T, 0)) if self.x is None else np.array(self.x, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape[:2] != (N, T):
            raise ValueError(f"regressors have shape {x.shape}, expected ({N}, {T}, K)")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("panel contains missing or non-finite values")
        units = tuple(self.unit_labels) if len(self.unit_labels) else tuple(range(N))
        times = tuple(self.time_labels) if len(self.time_labels) else tuple(range(T))
        if len(units) != N or len(times) != T:
            raise ValueError("label lengths do not match the panel dimensions")
        if len(set(units)) != N:
            raise ValueError("unit labels must be unique")
        if any(not (a < b) for a, b in zip(times[:-1], times[1:])):
            raise ValueError("time labels must be strictly increasing")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "unit_labels", units)
        object.__setattr__(self, "time_labels", times)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.x.shape[2]

    @property
    def shape(self):
        return self.n_units, self.n_periods, self.n_regressors

    def equals(self, other: "Panel") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
            and self.unit_labels == other.unit_labels
            and self.time_labels == other.time_labels
        )

    def __repr__(self):
        N, T, K = self.shape
        return f"Panel(N={N}, T={T}, K={K})"


def _maybe_number(token: str):
    try:
        v = int(token)
    except ValueError:
        try:
            v = float(token)
        except ValueError:
            return token
    return v


def load_panel(source, schema: Optional[Mapping[str, object]] = None) -> Panel:
    """Read a long-format CSV into a balanced :class:`Panel`.

    Parameters
    ----------
    source : bytes, str, path-like or binary/text file object
        UTF-8 CSV with a header row.
    schema : mapping, optional
        ``{"unit": col, "time": col, "y": col, "x": [cols]}``.  Defaults to
        ``unit``, ``time``, ``y`` and every remaining column whose name starts
        with ``x``, ordered as in the header.
    """
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    elif hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    else:
        with open(source, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()

    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty CSV input") from None

    schema = dict(schema or {})
    ucol = schema.get("unit", "unit")
    tcol = schema.get("time", "time")
    ycol = schema.get("y", "y")
    xcols = schema.get("x")
    if xcols is None:
        xcols = [h for h in header if h.lower().startswith("x") and h not in (ucol, tcol, ycol)]
    elif isinstance(xcols, str):
        xcols = [c for c in xcols.split(";") if c] if xcols else []
    for col in [ucol, tcol, ycol, *xcols]:
        if col not in header:
            raise ParseError(f"column {col!r} not found in header {header}")
    iu, it, iy = header.index(ucol), header.index(tcol), header.index(ycol)
    ix = [header.index(c) for c in xcols]

    cells = {}
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        unit = _maybe_number(row[iu].strip())
        time = _maybe_number(row[it].strip())
        if isinstance(time, str):
            raise ParseError(f"row {rowno}: non-numeric time id {row[it]!r}")
        try:
            values = [float(row[j]) for j in [iy, *ix]]
        except ValueError:
            raise ParseError(f"row {rowno}: non-numeric outcome or regressor field") from None
        key = (unit, time)
        if key in cells:
            raise DuplicateCellError(f"duplicate cell (unit={unit!r}, time={time!r}) at row {rowno}")
        cells[key] = values

    if not cells:
        raise ParseError("CSV contains a header but no data rows")
    units = sorted({k[0] for k in cells}, key=lambda u: (isinstance(u, str), u))
    times = sorted({k[1] for k in cells})
    N, T, K = len(units), len(times), len(ix)
    y = np.empty((N, T))
    x = np.empty((N, T, K))
    for i, u in enumerate(units):
        for t, s in enumerate(times):
            vals = cells.get((u, s))
            if vals is None:
                raise UnbalancedPanelError(f"unbalanced panel: missing cell (unit={u!r}, time={s!r})")
            y[i, t] = vals[0]
            x[i, t] = vals[1:]
    return Panel(y, x, tuple(units), tuple(times))


def panel_to_csv(panel: Panel) -> str:
    """Inverse of :func:`load_panel` with the default schema."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    K = panel.n_regressors
    w.writerow(["unit", "time", "y", *[f"x{k + 1}" for k in range(K)]])
    for i, u in enumerate(panel.unit_labels):
        for t, s in enumerate(panel.time_labels):
            w.writerow([u, s, repr(float(panel.y[i, t])), *[repr(float(v)) for v in panel.x[i, t]]])
    return buf.getvalue()


def subpanel(panel: Panel, units: Optional[Sequence[int]] = None, periods=None) -> Panel:
    """Restrict ``panel`` to a subset of units and a contiguous range of periods.

    ``units`` are 0-based positions (any order is kept as given); ``periods``
    is a ``range``/``slice`` or ``(start, stop)`` pair of 0-based positions
    with ``stop`` exclusive.
    """
    N, T, _ = panel.shape
    uidx = np.arange(N) if units is None else np.asarray(list(units), dtype=int)
    if periods is None:
        tsl = slice(0, T)
    elif isinstance(periods, slice):
        tsl = slice(*periods.indices(T))
    elif isinstance(periods, range):
        if periods.step != 1:
            raise ValueError("periods must be contiguous")
        tsl = slice(periods.start, periods.stop)
    else:
        start, stop = periods
        tsl = slice(int(start), int(stop))
    if uidx.size == 0 or tsl.stop - tsl.start <= 0 or tsl.step not in (None, 1):
        raise ValueError("empty unit selection or period range")
    if uidx.min() < 0 or uidx.max() >= N or tsl.start < 0 or tsl.stop > T:
        raise ValueError("selection out of range")
    return Panel(
        panel.y[uidx, tsl],
        panel.x[uidx, tsl, :],
        tuple(panel.unit_labels[i] for i in uidx),
        panel.time_labels[tsl],
    )


@dataclass
class PanelDiagnostics:
    noncolinearity_min_eigenvalue: Optional[float] = None
    noncolinearity_matrix: Optional[np.ndarray] = None
    within_unit_constant: list = field(default_factory=list)
    within_period_constant: list = field(default_factory=list)
    support_violation: bool = False
    support_message: str = ""

    @property
    def flagged(self) -> bool:
        low = self.noncolinearity_min_eigenvalue is not None and self.noncolinearity_min_eigenvalue <= 1e-10
        return low or any(self.within_unit_constant) or any(self.within_period_constant) or self.support_violation


def _coprojection(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    vv = v @ v
    if not vv > 0:
        raise ValueError("coprojection requires a nonzero vector")
    return np.eye(v.size) - np.outer(v, v) / vv


def noncolinearity_diagnostic(panel: Panel, alpha, gamma) -> PanelDiagnostics:
    """Minimum eigenvalue of the coprojected regressor Gram matrix.

    ``D[k1, k2] = tr(M_alpha X_k1 M_gamma X_k2') / (N T)`` with
    ``M_v = I - v (v'v)^{-1} v'``.
    """
    N, T, K = panel.shape
    if K < 1:
        raise ValueError("noncolinearity diagnostic needs at least one regressor")
    Ma = _coprojection(alpha)
    Mg = _coprojection(gamma)
    proj = np.einsum("ij,jtk,ts->isk", Ma, panel.x, Mg)
    D = np.einsum("itk,itl->kl", proj, panel.x) / (N * T)
    D = 0.5 * (D + D.T)
    eig = float(np.linalg.eigvalsh(D).min()) if K else float("nan")
    return PanelDiagnostics(noncolinearity_min_eigenvalue=eig, noncolinearity_matrix=D)


def validate(panel: Panel, family=None, tol: float = 1e-12) -> PanelDiagnostics:
    """Regressor variation flags and an outcome support check."""
    x = panel.x
    span_t = x.max(axis=1) - x.min(axis=1)  # (N, K)
    span_i = x.max(axis=0) - x.min(axis=0)  # (T, K)
    diag = PanelDiagnostics(
        within_unit_constant=[bool(np.all(span_t[:, k] <= tol)) for k in range(panel.n_regressors)],
        within_period_constant=[bool(np.all(span_i[:, k] <= tol)) for k in range(panel.n_regressors)],
    )
    if family is not None:
        ok = family.in_support(panel.y)
        if not np.all(ok):
            i, t = map(int, np.argwhere(~ok)[0])
            diag.support_violation = True
            diag.support_message = (
                f"{family.spec_string()}: outcome {panel.y[i, t]!r} at (unit={panel.unit_labels[i]!r}, "
                f"time={panel.time_labels[t]!r}) outside the family support"
            )
    return diag


def from_long(units: Iterable, times: Iterable, y: Iterable, x=None) -> Panel:
    """Build a panel from parallel long-format arrays (convenience for tests)."""
    units, times, y = list(units), list(times), np.asarray(list(y), dtype=float)
    x = np.zeros((len(y), 0)) if x is None else np.asarray(x, dtype=float).reshape(len(y), -1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit", "time", "y", *[f"x{k + 1}" for k in range(x.shape[1])]])
    for row in zip(units, times, y, x):
        w.writerow([row[0], row[1], repr(float(row[2])), *[repr(float(v)) for v in row[3]]])
    return load_panel(buf.getvalue().encode())


@dataclass(frozen=True)
class TrimResult:
    panel: Panel
    kept_units: np.ndarray
    kept_periods: np.ndarray

    n_units_dropped: int = 0
    n_periods_dropped: int = 0


def drop_uninformative(panel: Panel) -> TrimResult:
    """Iteratively remove units and periods whose outcomes do not vary.

    Under a binary family such a unit (or period) is fitted perfectly by
    sending its effect to infinity, so it carries no information about the
    common coefficients and makes the maximiser non-finite.  Removing a unit
    can make a period constant and vice versa, hence the iteration.
    Kept periods need not be contiguous.
    """
    units = np.arange(panel.n_units)
    periods = np.arange(panel.n_periods)
    y = panel.y
    while True:
        sub = y[np.ix_(units, periods)]
        ru = np.ptp(sub, axis=1) > 0
        rt = np.ptp(sub, axis=0) > 0
        if ru.all() and rt.all():
            break
        units, periods = units[ru], periods[rt]
        if units.size == 0 or periods.size == 0:
            raise PanelError("no outcome variation left after removing constant units and periods")
    out = Panel(
        panel.y[np.ix_(units, periods)],
        panel.x[np.ix_(units, periods, np.arange(panel.n_regressors))],
        tuple(panel.unit_labels[i] for i in units),
        tuple(panel.time_labels[t] for t in periods),
    )
    return TrimResult(out, units, periods, panel.n_units - units.size, panel.n_periods - periods.size)
