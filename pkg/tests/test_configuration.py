import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ipsavg.configuration import (
    MAX_SUBSET_SIZE,
    Configuration,
    Domain,
    ibp_battery,
    lp_expectation,
    pairwise_torus_distances,
    sample_poisson,
    sample_poisson_batch,
    subset_sum,
    torus_distance,
    verify_ibp,
)

UNIT = Domain(1, 1.0)


@pytest.mark.parametrize(
    "dom, x, y, expected",
    [
        (Domain(1, 1.0), [0.1], [0.9], 0.2),
        (Domain(1, 1.0), [0.3], [0.3], 0.0),
        (Domain(2, 2.0), [0.0, 0.0], [1.0, 1.0], math.sqrt(2)),
    ],
)
def test_torus_distance_examples(dom, x, y, expected):
    assert torus_distance(dom, x, y) == pytest.approx(expected, abs=1e-15)


def test_torus_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        torus_distance(Domain(2, 1.0), [0.1], [0.2, 0.3])


def test_torus_triangle_inequality():
    rng = np.random.default_rng(0)
    dom = Domain(2, 1.5)
    p = rng.uniform(0, dom.side, size=(3, 300, 2))
    dxy = pairwise_torus_distances(dom, p[0], p[1])
    dyz = pairwise_torus_distances(dom, p[1], p[2])
    dxz = pairwise_torus_distances(dom, p[0], p[2])
    # every triple (i, j, k): d(x_i, z_k) <= d(x_i, y_j) + d(y_j, z_k)
    assert np.all(dxz[:, None, :] <= dxy[:, :, None] + dyz[None, :, :] + 1e-12)


@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
)
def test_torus_distance_symmetric_and_bounded(x, y):
    dom = Domain(2, 1.0)
    d = torus_distance(dom, x, y)
    assert d == pytest.approx(torus_distance(dom, y, x), abs=1e-12)
    assert 0.0 <= d <= math.sqrt(2) / 2 + 1e-12


def test_configuration_rejects_duplicates():
    with pytest.raises(ValueError):
        Configuration([[0.1], [0.1]])


def test_configuration_json_round_trip():
    c = Configuration([[0.1, 0.2], [0.3, 0.4]])
    assert Configuration.from_json(c.to_json(), dim=2) == c


def test_sample_poisson_zero_intensity_is_empty():
    rng = np.random.default_rng(1)
    assert all(len(sample_poisson(UNIT, 0.0, rng)) == 0 for _ in range(100))


def test_sample_poisson_negative_intensity():
    with pytest.raises(ValueError):
        sample_poisson(UNIT, -1.0, np.random.default_rng(0))


def test_sample_poisson_count_law():
    rng = np.random.default_rng(2)
    n = 100_000
    counts = np.array([len(c) for c in sample_poisson_batch(UNIT, 2.0, n, rng)])
    assert abs(counts.mean() - 2.0) <= 3 * math.sqrt(2.0 / n)
    # variance of the sample variance for Poisson(2): (mu4 - sigma^4 (n-3)/(n-1)) / n
    mu4 = 2.0 + 3 * 2.0**2
    sd_var = math.sqrt((mu4 - 4.0 * (n - 3) / (n - 1)) / n)
    assert abs(counts.var(ddof=1) - 2.0) <= 3 * sd_var
    k = np.arange(0, 9)
    obs = np.array([np.sum(counts == j) for j in k[:-1]] + [np.sum(counts >= k[-1])])
    exp = np.append(stats.poisson.pmf(k[:-1], 2.0), stats.poisson.sf(k[-1] - 1, 2.0)) * n
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_sample_points_inside_window():
    c = sample_poisson(Domain(3, 2.0), 5.0, np.random.default_rng(3))
    assert np.all((c.points >= 0) & (c.points < 2.0))


@pytest.mark.parametrize(
    "G, exact",
    [
        (lambda eta: 1.0, math.e),
        (lambda eta: float(len(eta) == 0), 1.0),
        (lambda eta: float(len(eta)), math.e),
    ],
)
def test_lp_expectation_examples(G, exact):
    est, se = lp_expectation(G, UNIT, 50_000, np.random.default_rng(4))
    assert abs(est - exact) <= 3 * se + 1e-12


def test_lp_expectation_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        lp_expectation(lambda eta: math.inf, UNIT, 10, np.random.default_rng(0))


def test_subset_sum_counts_subsets():
    eta = Configuration(np.linspace(0, 0.9, 6)[:, None])
    assert subset_sum(lambda xi, rest: 1.0, eta) == 2**6
    assert subset_sum(lambda xi, rest: float(len(xi)), eta) == 6 * 2**5


def test_subset_sum_guard():
    eta = Configuration(np.linspace(0, 0.99, MAX_SUBSET_SIZE + 1)[:, None])
    with pytest.raises(ValueError, match="infeasible"):
        subset_sum(lambda xi, rest: 1.0, eta)


def test_ibp_empty_indicator_is_exact():
    rep = verify_ibp(lambda xi, eta: float(len(xi) == 0 and len(eta) == 0), UNIT, 20_000, np.random.default_rng(5))
    assert rep.passed
    assert rep.to_dict()["pass"] is True


def test_ibp_battery_shape_and_exact_values():
    battery = ibp_battery(UNIT, np.random.default_rng(0))
    assert len(battery) == 5
    names = [b[0] for b in battery]
    assert names[:3] == ["empty_indicator", "power_product", "count_times_empty"]
    assert battery[1][2] == pytest.approx(math.e)
    assert battery[2][2] == pytest.approx(math.e)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 0.999), min_size=0, max_size=8, unique=True))
def test_separable_subset_sum_factorizes(seed, xs):
    # sum over xi of u(xi) v(eta minus xi) = prod over x of (u({x}) + v({x}))
    for _, G, _ in ibp_battery(UNIT, np.random.default_rng(seed))[3:]:
        eta = Configuration(np.array(xs).reshape(-1, 1))
        empty = Configuration.empty(1)
        expected = 1.0
        for x in xs:
            single = Configuration([[x]])
            expected *= G(single, empty) + G(empty, single)
        assert subset_sum(G, eta) == pytest.approx(expected, rel=1e-12)
