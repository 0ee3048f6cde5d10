import csv

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from ipsavg.semigroup import (
    SplitGenerator,
    birth_death_chain,
    dense_resolvent,
    linear_birth_death,
    mass_defect,
    quadratic_pure_birth,
    resolvent_series,
    series_tail_bound,
    stochasticity_probe,
    write_defect_csv,
)


def cycle3():
    # 0 -> 1 -> 2 -> 0 at rates 1, 2, 3 (forward form: B[j, i] is the rate i -> j)
    B = np.zeros((3, 3))
    B[1, 0], B[2, 1], B[0, 2] = 1.0, 2.0, 3.0
    return SplitGenerator([1.0, 2.0, 3.0], B)


def random_conservative(rng, n):
    R = rng.exponential(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.5)
    np.fill_diagonal(R, 0.0)
    return SplitGenerator(R.sum(axis=0), R)


def test_validation():
    with pytest.raises(ValueError):
        SplitGenerator([1.0], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        SplitGenerator([-1.0, 0.0], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        SplitGenerator([1.0, 1.0], [[0.0, 2.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        SplitGenerator([1.0, 1.0], [[0.5, 0.0], [0.0, 0.0]])


def test_from_forward_round_trip():
    sg = cycle3()
    again = SplitGenerator.from_forward(sg.forward_matrix())
    np.testing.assert_array_equal(again.q, sg.q)
    assert abs(again.B - sg.B).max() == 0
    assert sg.conservative
    # the column mass of B equals q in the conservative case
    np.testing.assert_allclose(sg.column_mass(), sg.q)


def test_zero_jump_kernel():
    sg = SplitGenerator([1.0, 3.0], sp.csr_matrix((2, 2)))
    nu = np.array([2.0, 4.0])
    np.testing.assert_array_equal(resolvent_series(sg, 1.0, 1.0, nu, 0), nu / (1.0 + sg.q))
    np.testing.assert_array_equal(resolvent_series(sg, 1.0, 1.0, nu, 5), nu / (1.0 + sg.q))
    assert not sg.conservative


def test_cycle_matches_dense_solve():
    sg, nu = cycle3(), np.array([0.2, 0.3, 0.5])
    approx = resolvent_series(sg, 1.0, 1.0, nu, 200)
    exact = dense_resolvent(sg, 1.0, nu)
    assert np.abs(approx - exact).max() <= 1e-8
    # a resolvent of a stochastic semigroup has a (a - G)^{-1} nu of full mass
    assert approx.sum() * 1.0 == pytest.approx(1.0, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.floats(0.1, 5.0))
def test_series_vs_dense_on_random_conservative(seed, n, a):
    rng = np.random.default_rng(seed)
    sg = random_conservative(rng, n)
    nu = rng.dirichlet(np.ones(n))
    n_terms = 400
    approx = resolvent_series(sg, a, 1.0, nu, n_terms)
    exact = dense_resolvent(sg, a, nu)
    tail = series_tail_bound(sg, a, 1.0, nu, n_terms)
    assert np.abs(approx - exact).sum() <= tail + 1e-12
    if tail < 1e-10:
        assert np.abs(approx - exact).max() <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_series_monotone_in_terms_and_r(seed, r1, r2):
    rng = np.random.default_rng(seed)
    sg = random_conservative(rng, 6)
    nu = rng.dirichlet(np.ones(6))
    lo, hi = sorted((r1, r2))
    prev = None
    for n in range(0, 30, 3):
        cur = resolvent_series(sg, 0.7, lo, nu, n)
        assert np.all(cur >= 0)
        if prev is not None:
            assert np.all(cur >= prev)
        assert np.all(resolvent_series(sg, 0.7, hi, nu, n) >= cur)
        prev = cur


def test_series_argument_checks():
    sg = cycle3()
    with pytest.raises(ValueError):
        resolvent_series(sg, 0.0, 1.0, np.ones(3), 5)
    with pytest.raises(ValueError):
        resolvent_series(sg, 1.0, 1.5, np.ones(3), 5)
    with pytest.raises(ValueError):
        resolvent_series(sg, 1.0, 1.0, -np.ones(3), 5)


def test_explosive_resolvent_mass_defect():
    # pure birth from 1: a R(a) mass = 1 - prod_{n <= N} n^2 / (a + n^2), which tends to
    # 1 - pi / sinh(pi) < 1 at a = 1
    a = 1.0
    masses = []
    for N in (16, 64, 256):
        nu = np.zeros(N + 1)
        nu[1] = 1.0
        masses.append(a * resolvent_series(quadratic_pure_birth(N), a, 1.0, nu, N + 1).sum())
        exact = 1.0 - np.prod([n * n / (a + n * n) for n in range(1, N + 1)])
        assert masses[-1] == pytest.approx(exact, rel=1e-12)
    assert all(b >= a_ for a_, b in zip(masses, masses[1:]))
    assert masses[-1] == pytest.approx(1.0 - np.pi / np.sinh(np.pi), abs=0.01)
    assert masses[-1] < 0.75


def test_chains():
    sg = linear_birth_death(3, 2.0, 1.0)
    np.testing.assert_allclose(sg.q, [0.0, 3.0, 6.0, 9.0])
    # births out of the top state leak
    np.testing.assert_allclose(sg.leak(), [0.0, 0.0, 0.0, 6.0])
    with pytest.raises(ValueError):
        birth_death_chain(-1, lambda k: 0.0, lambda k: 0.0)
    with pytest.raises(ValueError):
        birth_death_chain(2, lambda k: -1.0, lambda k: 0.0)


def test_probe_linear_is_stochastic():
    family = [linear_birth_death(2**k, 1.0, 1.0) for k in range(4, 11)]
    rep = stochasticity_probe(family, 1.0, init=1)
    assert rep["monotone"]
    assert rep["defects"][-1] < 1e-6
    assert rep["verdict"] == "stochastic"


def test_probe_quadratic_explodes():
    family = [quadratic_pure_birth(2**k) for k in range(4, 11)]
    rep = stochasticity_probe(family, 2.0, init=1)
    assert rep["monotone"]
    assert min(rep["defects"]) > 0.1
    assert rep["extrapolated_defect"] > 0.1
    assert rep["verdict"] == "possible explosion"
    assert rep["sizes"] == [2**k + 1 for k in range(4, 11)]


def test_probe_zero_generator():
    family = [SplitGenerator(np.zeros(n), sp.csr_matrix((n, n))) for n in (2, 4, 8)]
    rep = stochasticity_probe(family, 3.0)
    assert rep["defects"] == [0.0, 0.0, 0.0]
    assert rep["verdict"] == "stochastic"


def test_probe_rejects_bad_families():
    with pytest.raises(ValueError, match="not nested"):
        stochasticity_probe([linear_birth_death(4, 1.0, 1.0), linear_birth_death(8, 2.0, 1.0)], 1.0, init=1)
    with pytest.raises(ValueError, match="strictly grow"):
        stochasticity_probe([linear_birth_death(4, 1.0, 1.0)] * 2, 1.0)
    with pytest.raises(ValueError):
        stochasticity_probe([], 1.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.0, 3.0), st.floats(0.1, 3.0))
def test_minimality_ordering(lam, mu, t):
    family = [linear_birth_death(n, lam, mu) for n in (3, 6, 12, 24)]
    d = [mass_defect(g, t, 1) for g in family]
    assert all(b <= a + 1e-12 for a, b in zip(d, d[1:]))


def test_defect_csv(tmp_path):
    rep = stochasticity_probe([quadratic_pure_birth(n) for n in (4, 8)], 1.0, init=1)
    write_defect_csv(tmp_path / "d.csv", rep, ["x=1"])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    rows = list(csv.DictReader(lines[1:]))
    assert lines[0] == "# x=1"
    assert [r["N"] for r in rows] == ["4", "8"]
    assert float(rows[0]["defect"]) == rep["defects"][0]
