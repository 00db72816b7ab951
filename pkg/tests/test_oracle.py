import warnings

import numpy as np
import pytest

from ifepanel.estimator import FitOptions
from ifepanel.oracle import compare_with_ife, rank1_fit
from ifepanel.panel import Panel


def test_exact_rank_one(rng):
    a, g = rng.standard_normal(7), rng.uniform(0.5, 1.5, 5)
    r = rank1_fit(np.outer(a, g))
    assert np.max(np.abs(r.pi - np.outer(a, g))) < 1e-12
    assert r.alpha @ r.alpha == pytest.approx(r.gamma @ r.gamma)
    assert r.gamma.sum() >= 0 and not r.ambiguous


def test_identity_is_ambiguous():
    with pytest.warns(RuntimeWarning, match="not unique"):
        r = rank1_fit(np.eye(2))
    assert r.ambiguous and r.sse == pytest.approx(1.0)


@pytest.mark.parametrize("shape", [(10, 10), (12, 5), (5, 12)])
def test_sse_matches_svd(rng, shape):
    Y = rng.standard_normal(shape)
    s = np.linalg.svd(Y, compute_uv=False)
    r = rank1_fit(Y)
    assert r.sse == pytest.approx(np.sum(s[1:] ** 2), abs=1e-10)
    assert r.sigma1 == pytest.approx(s[0], rel=1e-10)
    # no competing rank-1 candidate does better
    for _ in range(20):
        u, v = rng.standard_normal(shape[0]), rng.standard_normal(shape[1])
        assert r.sse <= np.sum((Y - np.outer(u, v)) ** 2)


def test_rejects_zero_matrix():
    with pytest.raises(ValueError):
        rank1_fit(np.zeros((3, 3)))


def test_comparison_noiseless_and_noisy(rng):
    a, g = rng.standard_normal(8), rng.standard_normal(6)
    c = compare_with_ife(Panel(np.outer(a, g), None))
    assert c.max_discrepancy < 1e-10 and c.delta_pca < 1e-20
    y = np.outer(a, g) + rng.standard_normal((8, 6))
    c = compare_with_ife(Panel(y, None), options=FitOptions(tol=1e-10))
    assert c.ife_converged and c.max_discrepancy <= 1e-6
    assert c.objective_ife == pytest.approx(c.objective_pca, abs=1e-9)
    assert set(c.to_dict()) >= {"max_product_diff", "delta_diff", "ife_converged"}
    with pytest.raises(ValueError):
        compare_with_ife(Panel(y, np.ones((8, 6, 1))))
