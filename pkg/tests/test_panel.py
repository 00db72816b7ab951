import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifepanel.exceptions import DuplicateCellError, PanelError, ParseError, UnbalancedPanelError
from ifepanel.families import Probit
from ifepanel.panel import (
    Panel, drop_uninformative, from_long, load_panel, noncolinearity_diagnostic, panel_to_csv, subpanel, validate,
)

CSV = b"unit,time,y,x1\nu1,1,0.5,1\nu1,2,1.5,2\nu2,1,2.5,3\nu2,2,3.5,4\n"


def test_load_small_panel():
    p = load_panel(CSV)
    assert p.shape == (2, 2, 1)
    assert p.unit_labels == ("u1", "u2") and p.time_labels == (1, 2)
    assert np.array_equal(p.y, [[0.5, 1.5], [2.5, 3.5]])
    assert np.array_equal(p.x[:, :, 0], [[1, 2], [3, 4]])


def test_load_sorts_rows_and_is_deterministic():
    shuffled = b"unit,time,y,x1\nu2,2,3.5,4\nu1,2,1.5,2\nu2,1,2.5,3\nu1,1,0.5,1\n"
    a, b = load_panel(CSV), load_panel(shuffled)
    assert a.equals(b) and a.equals(load_panel(CSV))


def test_unbalanced_names_missing_cell():
    with pytest.raises(UnbalancedPanelError, match=r"unit='u2', time=2"):
        load_panel(b"unit,time,y\nu1,1,0\nu1,2,1\nu2,1,0\n")


def test_duplicate_cell():
    with pytest.raises(DuplicateCellError, match="u1"):
        load_panel(b"unit,time,y\nu1,1,0\nu1,1,1\n")


def test_parse_errors_report_row():
    with pytest.raises(ParseError, match="row 3"):
        load_panel(b"unit,time,y\nu1,1,0\nu1,2,abc\n")
    with pytest.raises(ParseError):
        load_panel(b"")
    with pytest.raises(ParseError, match="not found"):
        load_panel(CSV, {"y": "outcome"})


def test_schema_override():
    raw = b"id,year,out,a,b\n1,2000,1,0.1,5\n1,2001,0,0.2,6\n2,2000,1,0.3,7\n2,2001,1,0.4,8\n"
    p = load_panel(raw, {"unit": "id", "time": "year", "y": "out", "x": ["b", "a"]})
    assert p.shape == (2, 2, 2)
    assert np.array_equal(p.x[0, 0], [5, 0.1])


def test_csv_roundtrip(rng):
    p = Panel(rng.standard_normal((3, 4)), rng.standard_normal((3, 4, 2)))
    assert load_panel(panel_to_csv(p).encode()).equals(p)


def test_panel_is_immutable(rng):
    p = Panel(rng.standard_normal((2, 3)), None)
    with pytest.raises(ValueError):
        p.y[0, 0] = 1.0
    assert p.n_regressors == 0


def test_subpanel_examples():
    p = Panel(np.arange(24.0).reshape(4, 6), np.arange(24.0).reshape(4, 6, 1))
    assert subpanel(p, periods=(0, 3)).shape == (4, 3, 1)
    s = subpanel(p, units=[1, 3])
    assert s.shape == (2, 6, 1) and s.unit_labels == (1, 3)
    assert subpanel(p).equals(p)
    with pytest.raises(ValueError):
        subpanel(p, units=[])
    with pytest.raises(ValueError):
        subpanel(p, periods=(3, 3))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_subpanel_composition(data):
    N, T = 6, 8
    p = Panel(np.arange(N * T, dtype=float).reshape(N, T), None)
    u1 = data.draw(st.lists(st.integers(0, N - 1), min_size=2, max_size=N, unique=True))
    a = data.draw(st.integers(0, T - 3))
    b = data.draw(st.integers(a + 2, T))
    u2 = data.draw(st.lists(st.integers(0, len(u1) - 1), min_size=1, max_size=len(u1), unique=True))
    c = data.draw(st.integers(0, b - a - 1))
    d = data.draw(st.integers(c + 1, b - a))
    nested = subpanel(subpanel(p, u1, (a, b)), u2, (c, d))
    direct = subpanel(p, [u1[j] for j in u2], (a + c, a + d))
    assert nested.equals(direct)


def test_noncolinearity_examples(rng):
    N = T = 20
    ones_n, ones_t = np.ones(N), np.ones(T)
    const = Panel(rng.standard_normal((N, T)), np.full((N, T, 1), 3.0))
    assert noncolinearity_diagnostic(const, ones_n, ones_t).noncolinearity_min_eigenvalue == pytest.approx(0, abs=1e-12)
    a, g = rng.standard_normal(N), rng.standard_normal(T)
    inter = Panel(rng.standard_normal((N, T)), np.outer(a, g)[:, :, None])
    assert abs(noncolinearity_diagnostic(inter, a, g).noncolinearity_min_eigenvalue) < 1e-12
    noise = Panel(rng.standard_normal((N, T)), rng.standard_normal((N, T, 1)))
    assert noncolinearity_diagnostic(noise, ones_n, ones_t).noncolinearity_min_eigenvalue > 0.5
    with pytest.raises(ValueError):
        noncolinearity_diagnostic(noise, np.zeros(N), ones_t)


def test_noncolinearity_matches_dense_trace(rng):
    N, T, K = 7, 5, 3
    p = Panel(rng.standard_normal((N, T)), rng.standard_normal((N, T, K)))
    a, g = rng.standard_normal(N), rng.standard_normal(T)
    Ma = np.eye(N) - np.outer(a, a) / (a @ a)
    Mg = np.eye(T) - np.outer(g, g) / (g @ g)
    D = np.array([[np.trace(Ma @ p.x[:, :, k] @ Mg @ p.x[:, :, l].T) for l in range(K)] for k in range(K)]) / (N * T)
    diag = noncolinearity_diagnostic(p, a, g)
    assert np.allclose(diag.noncolinearity_matrix, D, atol=1e-13)
    assert np.allclose(diag.noncolinearity_matrix, diag.noncolinearity_matrix.T, atol=1e-12)
    assert diag.noncolinearity_min_eigenvalue == pytest.approx(np.linalg.eigvalsh(D)[0], abs=1e-12)
    assert diag.noncolinearity_min_eigenvalue >= -1e-10


def test_validate_flags(rng):
    N, T = 4, 5
    x = rng.standard_normal((N, T, 2))
    x[:, :, 1] = np.arange(N)[:, None]  # constant within each unit
    y = rng.integers(0, 2, (N, T)).astype(float)
    d = validate(Panel(y, x), Probit())
    assert d.within_unit_constant == [False, True] and not d.support_violation
    y[1, 2] = 2.0
    d = validate(Panel(y, x), Probit())
    assert d.support_violation and "unit=1" in d.support_message
    clean = validate(Panel(rng.standard_normal((N, T)), rng.standard_normal((N, T, 1))))
    assert not clean.flagged


def test_drop_uninformative_iterates():
    y = np.array([[1, 1, 1], [0, 1, 0], [1, 0, 0], [1, 1, 0]], dtype=float)
    tr = drop_uninformative(Panel(y, None))
    # unit 0 is constant; without it period 2 is constant, and then unit 3 is
    assert list(tr.kept_units) == [1, 2] and list(tr.kept_periods) == [0, 1]
    assert tr.n_units_dropped == 2 and tr.n_periods_dropped == 1
    assert np.ptp(tr.panel.y, axis=0).min() > 0 and np.ptp(tr.panel.y, axis=1).min() > 0
    with pytest.raises(PanelError):
        drop_uninformative(Panel(np.ones((3, 3)), None))


def test_from_long():
    p = from_long([1, 1, 2, 2], [0, 1, 0, 1], [1, 2, 3, 4], x=[[1], [2], [3], [4]])
    assert p.shape == (2, 2, 1) and p.y[1, 1] == 4
