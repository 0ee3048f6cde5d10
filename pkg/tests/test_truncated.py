import math
from itertools import combinations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from ipsavg.config import load
from ipsavg.configuration import Configuration, Domain, torus_distance
from ipsavg.logistic import KernelFunction, ModelParams, averaged_rates, beta, damping, total_rate
from ipsavg.truncated import (
    EnvChain,
    EvolveError,
    SiteLattice,
    SparseGenerator,
    TruncatedSpace,
    averaging_error,
    build_averaged_generator,
    build_joint_generator,
    build_system_generator,
    delta_error,
    dense_evolve,
    enumerate_space,
    evolve,
    evolve_grid,
    first_moment,
    joint_initial,
    moment_bound_check,
    operator_norm_check,
)

DOM = Domain(1, 1.0)
ZERO = KernelFunction.zero()
EMPTY = Configuration.empty(1)


def logistic(delta=0.0, **kw):
    args = dict(
        m0=0.5, lambda0=1.5, z=1.0,
        a_plus=KernelFunction.density("gaussian", 0.2),
        a_minus=KernelFunction("gaussian", 0.5, 0.2),
        kappa=KernelFunction("gaussian", 1.0, 0.1),
        psi=KernelFunction("gaussian", 0.5, 0.1),
        delta=delta,
    )
    args.update(kw)
    return ModelParams(**args)


@pytest.fixture
def inst():
    """The 7-state instance: 3 sites, at most 2 points, one-site environment chain."""
    space = enumerate_space(3, 2)
    lat = SiteLattice.uniform(DOM, 3)
    env = EnvChain.one_site_glauber(1.0, lat.sites[0])
    return space, lat, env


# state space


@pytest.mark.parametrize("M, N, size", [(3, 2, 7), (3, 3, 8), (5, 0, 1), (10, 4, 386)])
def test_space_size(M, N, size):
    assert len(enumerate_space(M, N)) == size == sum(math.comb(M, k) for k in range(N + 1))


def test_space_order_and_round_trip():
    space = enumerate_space(4, 3)
    assert list(space.sizes) == sorted(space.sizes)
    for i in range(len(space)):
        assert space.index([space.masks[i]])[0] == i
        assert space.mask_of(space.sites_of(i)) == space.masks[i]
    # within one size, bitmask values increase
    for k in range(4):
        block = space.masks[space.sizes == k]
        assert np.all(np.diff(block) > 0)
    assert {space.sites_of(i) for i in range(len(space))} == {
        c for k in range(4) for c in combinations(range(4), k)
    }


def test_space_errors():
    with pytest.raises(ValueError):
        enumerate_space(3, 4)
    with pytest.raises(ValueError):
        enumerate_space(25, 1)
    # sum of C(24, k) for k <= 13 is about 1.2e7
    with pytest.raises(ValueError, match="truncation too large"):
        enumerate_space(24, 13)


def test_lattice_uniform():
    lat = SiteLattice.uniform(Domain(2, 2.0), 9)
    assert lat.M == 9 and lat.cell_volume == pytest.approx(4.0 / 9)
    assert len({tuple(s) for s in lat.sites}) == 9
    with pytest.raises(ValueError):
        SiteLattice.uniform(Domain(2, 1.0), 8)
    np.testing.assert_array_equal(lat.site_index(lat.sites[[4, 2]]), [4, 2])


# generators


def test_zero_rates_give_zero_matrix(inst):
    space, lat, _ = inst
    p = logistic(m0=0.0, lambda0=0.0, z=0.0, a_minus=ZERO, kappa=ZERO, psi=ZERO)
    assert build_system_generator(space, lat, EMPTY, p, DOM).matrix.nnz == 0


def test_two_state_hand_example():
    space, lat = enumerate_space(1, 1), SiteLattice.uniform(DOM, 1)
    G = build_system_generator(space, lat, EMPTY, logistic(m0=0.7), DOM, delta=0.0)
    np.testing.assert_allclose(G.backward_matrix().toarray(), [[0.0, 0.0], [0.7, -0.7]])
    np.testing.assert_allclose(G.forward_matrix().toarray(), [[0.0, 0.7], [0.0, -0.7]])


def test_negative_delta_rejected(inst):
    space, lat, _ = inst
    with pytest.raises(ValueError, match="delta must be >= 0"):
        build_system_generator(space, lat, EMPTY, logistic(), DOM, delta=-1.0)


def test_damped_outflow_matches_total_rate(inst):
    space, lat, env = inst
    p, delta = logistic(), 0.3
    gamma = env.states[1]
    G = build_system_generator(space, lat, gamma, p, DOM, delta)
    lost = []
    for i in range(len(space)):
        eta = lat.configuration(space.sites_of(i))
        q = total_rate(eta, gamma, p, DOM)
        assert G.total_rate[i] == pytest.approx(q, rel=1e-12)
        lost.append(q * damping(q, delta) - G.outflow()[i])
    # the only missing outflow is suppressed births, which are nonnegative
    assert min(lost) >= -1e-12
    assert lost[0] == 0.0


def test_generators_conservative(inst):
    space, lat, env = inst
    for delta in (0.0, 0.5):
        for G in (
            build_system_generator(space, lat, env.states[1], logistic(), DOM, delta),
            build_joint_generator(space, lat, env, logistic(), DOM, 0.1, delta),
            build_averaged_generator(space, lat, env, logistic(), DOM, delta),
        ):
            assert G.check() == []
            assert np.max(np.abs(G.balance())) <= 1e-12


def test_joint_single_env_state_reduces(inst):
    space, lat, _ = inst
    trivial = EnvChain.trivial(EMPTY)
    J = build_joint_generator(space, lat, trivial, logistic(), DOM, 0.01, 0.2)
    S = build_system_generator(space, lat, EMPTY, logistic(), DOM, 0.2)
    assert abs(J.forward_matrix() - S.forward_matrix()).max() == 0


def test_joint_epsilon_scaling(inst):
    space, lat, env = inst
    a = build_joint_generator(space, lat, env, logistic(), DOM, 0.2).forward_matrix().toarray()
    b = build_joint_generator(space, lat, env, logistic(), DOM, 0.1).forward_matrix().toarray()
    n = len(space)
    for i in range(2):
        for j in range(2):
            A, B = a[i * n:(i + 1) * n, j * n:(j + 1) * n], b[i * n:(i + 1) * n, j * n:(j + 1) * n]
            if i == j:
                # diagonal blocks also carry the -(1/eps) exit rate of the environment
                np.testing.assert_allclose(B - A, np.eye(n) * env.Q[i, i] / 0.2, atol=1e-12)
            else:
                np.testing.assert_allclose(B, 2 * A, rtol=1e-15)
    with pytest.raises(ValueError, match="epsilon must be positive"):
        build_joint_generator(space, lat, env, logistic(), DOM, 0.0)


def test_averaged_single_state_equals_system(inst):
    space, lat, _ = inst
    g = Configuration([[0.1]])
    A = build_averaged_generator(space, lat, EnvChain.trivial(g), logistic(), DOM, 0.4)
    S = build_system_generator(space, lat, g, logistic(), DOM, 0.4)
    assert abs(A.forward_matrix() - S.forward_matrix()).max() == 0


def test_averaged_delta_zero_closed_form(inst):
    space, lat, env = inst
    p = logistic(a_minus=ZERO)
    G = build_averaged_generator(space, lat, env, p, DOM, 0.0).backward_matrix().toarray()
    mu1 = env.mu[1]
    w = lat.sites[0]
    for x in range(3):
        r = torus_distance(DOM, lat.sites[x], w)
        m_bar_x = p.m0 + mu1 * p.kappa(r)
        i = space.index([space.mask_of([x])])[0]
        assert G[i, 0] == pytest.approx(m_bar_x, rel=1e-14)


def test_averaging_order_matters(inst):
    space, lat, env = inst
    delta = 0.5
    p = logistic()
    avg = build_averaged_generator(space, lat, env, p, DOM, delta).backward_matrix().toarray()
    undamped = build_averaged_generator(space, lat, env, p, DOM, 0.0)
    q_bar = undamped.total_rate if undamped.total_rate is not None else -undamped.backward_matrix().diagonal()
    naive = np.diag(np.exp(-delta * q_bar)) @ undamped.backward_matrix().toarray()
    systems = [build_system_generator(space, lat, g, p, DOM, delta) for g in env.states]
    env_dependent = np.abs(systems[0].total_rate - systems[1].total_rate) > 1e-2
    assert env_dependent.sum() >= 3
    off = ~np.eye(len(space), dtype=bool)
    mask = env_dependent[:, None] & off & (avg != 0)
    assert np.all(np.abs(avg - naive)[mask] > 1e-12)
    # the average of damped rates lies strictly between the two damped rates
    parts = [g.backward_matrix().toarray() for g in systems]
    lo, hi = np.minimum(*parts), np.maximum(*parts)
    strict = off & (hi > lo)
    assert strict.any()
    assert np.all((avg[strict] > lo[strict]) & (avg[strict] < hi[strict]))


# evolution


def test_evolve_zero_generator():
    G = SparseGenerator(sp.csr_matrix((5, 5)), "forward")
    rho = np.array([0.1, 0.2, 0.3, 0.0, 0.4])
    np.testing.assert_array_equal(evolve(rho, G, 3.0), rho)


@pytest.mark.parametrize("method", ["uniformization", "rk_adaptive", "dense"])
def test_evolve_pure_death(method):
    G = build_system_generator(enumerate_space(1, 1), SiteLattice.uniform(DOM, 1), EMPTY, logistic(m0=1.0), DOM, 0.0).adjoint()
    rho = evolve([0.0, 1.0], G, 1.0, method, tol=1e-10)
    assert rho[1] == pytest.approx(math.exp(-1), abs=1e-9)
    assert rho.sum() == pytest.approx(1.0, abs=1e-10)


def test_uniformization_matches_rk(inst):
    space, lat, env = inst
    G = build_averaged_generator(space, lat, env, logistic(), DOM, 0.1)
    rho0 = np.zeros(len(space))
    rho0[1] = 1.0
    tol = 1e-10
    a = evolve(rho0, G, 2.0, "uniformization", tol)
    b = evolve(rho0, G, 2.0, "rk_adaptive", tol)
    assert np.abs(a - b).sum() <= 10 * tol


def test_evolve_reports_unreachable_tolerance(inst):
    space, lat, env = inst
    G = build_joint_generator(space, lat, env, logistic(), DOM, 1e-3)
    with pytest.raises(EvolveError) as exc:
        evolve(joint_initial(np.eye(len(space))[1], env), G, 5.0, tol=1e-10, max_terms=100)
    assert exc.value.residual > 0


def test_evolve_input_checks(inst):
    space, lat, env = inst
    G = build_averaged_generator(space, lat, env, logistic(), DOM)
    with pytest.raises(ValueError):
        evolve(np.ones(3), G, 1.0)
    with pytest.raises(ValueError):
        evolve(-np.eye(len(space))[0], G, 1.0)
    with pytest.raises(ValueError):
        evolve(np.eye(len(space))[0], G, 1.0, method="euler")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_duality(seed):
    rng = np.random.default_rng(seed)
    space = enumerate_space(3, 2)
    lat = SiteLattice.uniform(DOM, 3)
    env = EnvChain.one_site_glauber(1.0, lat.sites[0])
    G = build_averaged_generator(space, lat, env, logistic(), DOM, 0.2)
    F = rng.normal(size=len(space))
    rho0 = rng.dirichlet(np.ones(len(space)))
    t, tol = 1.3, 1e-10
    lhs = F @ evolve(rho0, G, t, tol=tol)
    # F_t = exp(t L) F evolves by the transpose, i.e. the backward generator
    F_t = linalg.expm(t * G.backward_matrix().toarray()) @ F
    assert lhs == pytest.approx(F_t @ rho0, abs=10 * tol * max(1.0, np.abs(F).max()))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 5.0), st.floats(1e-3, 1.0))
def test_positivity_mass_and_dense_oracle(seed, t, eps):
    rng = np.random.default_rng(seed)
    space = enumerate_space(3, 2)
    lat = SiteLattice.uniform(DOM, 3)
    env = EnvChain.one_site_glauber(2.0, lat.sites[1])
    G = build_joint_generator(space, lat, env, logistic(), DOM, eps, 0.1)
    rho0 = rng.dirichlet(np.ones(G.dimension))
    tol = 1e-10
    rho = evolve(rho0, G, t, tol=tol)
    assert rho.min() >= -tol
    assert rho.sum() == pytest.approx(1.0, abs=tol)
    assert np.abs(rho - dense_evolve(rho0, G, t)).sum() <= 1e-8


def test_evolve_grid_matches_single_calls(inst):
    space, lat, env = inst
    G = build_averaged_generator(space, lat, env, logistic(), DOM)
    rho0 = np.eye(len(space))[2]
    grid = evolve_grid(rho0, G, [0.0, 0.5, 2.0])
    np.testing.assert_array_equal(grid[0], rho0)
    assert np.abs(grid[2] - dense_evolve(rho0, G, 2.0)).sum() < 1e-9
    with pytest.raises(ValueError):
        evolve_grid(rho0, G, [1.0, 0.5])


# averaging and damping experiments


def test_averaging_trivial_env_is_exact(inst):
    space, lat, _ = inst
    rho0 = np.eye(len(space))[1]
    rows = averaging_error(space, lat, EnvChain.trivial(EMPTY), logistic(), DOM, [1.0, 0.1], 0.1, [0.0, 1.0], rho0)
    assert max(r["error"] for r in rows) <= 1e-9


def test_averaging_error_decreases(inst):
    space, lat, env = inst
    rho0 = np.eye(len(space))[1]
    t_grid = [0.0, 0.5, 1.0, 2.0]
    rows = averaging_error(space, lat, env, logistic(), DOM, [1.0, 0.1, 0.01, 0.001], 0.1, t_grid, rho0)
    sups = [r["sup_error"] for r in rows if r["t"] == 0.0]
    assert all(b < a for a, b in zip(sups, sups[1:]))
    assert sups[-1] < 1e-2
    assert all(r["error"] == 0.0 for r in rows if r["t"] == 0.0)
    assert all(r["tv_error"] <= r["error"] + 1e-12 for r in rows)


def test_delta_error_examples(inst):
    space, lat, env = inst
    # small rates keep delta * q well below 1, where the first-order bound is sharp
    cfg = load("delta-sweep")
    p = ModelParams.from_json(cfg["model"])
    rho0 = np.eye(len(space))[1]
    deltas = [1.0, 0.3, 0.1, 0.03, 0.01]
    rows = delta_error(space, lat, env, p, DOM, [0.0] + deltas, [0.5, 1.0, 2.0], rho0)
    sups = {r["delta"]: r["sup_error"] for r in rows}
    assert sups[0.0] == 0.0
    vals = [sups[d] for d in deltas]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    slope = np.polyfit(np.log(deltas), np.log(vals), 1)[0]
    assert slope >= 0.9
    # mass on the empty configuration never moves
    rows = delta_error(space, lat, env, p, DOM, deltas, [1.0], np.eye(len(space))[0])
    assert all(r["error"] <= 1e-15 for r in rows)


def test_operator_norm_examples(inst):
    space, lat, env = inst
    for p in (logistic(), logistic(m0=5.0, lambda0=10.0)):
        G = build_averaged_generator(space, lat, env, p, DOM, 1.0)
        res = operator_norm_check(G, 1.0)
        assert res["pass"] and res["norm"] <= 2 / math.e
    zero = SparseGenerator(sp.csr_matrix((3, 3)), "forward")
    assert operator_norm_check(zero, 0.5)["norm"] == 0.0
    with pytest.raises(ValueError, match="bound vacuous"):
        operator_norm_check(zero, 0.0)


def test_operator_norm_bound_attained():
    delta = 0.25
    p = logistic(m0=1 / delta, lambda0=0.0, z=0.0, a_minus=ZERO, kappa=ZERO, psi=ZERO)
    G = build_system_generator(enumerate_space(1, 1), SiteLattice.uniform(DOM, 1), EMPTY, p, DOM, delta).adjoint()
    res = operator_norm_check(G, delta)
    assert res["norm"] == pytest.approx(2 / (math.e * delta), rel=1e-15)
    assert res["pass"]


# first-moment bound


def _moment_model(z):
    # unit-mass kappa, psi of mass 0.5, so beta = 1 - z / 2
    return ModelParams.from_json(load("moment-bound")["model"]).with_(z=z)


def _moment_space():
    # the shipped truncation: 14 sites, at most 10 points
    return enumerate_space(14, 10), SiteLattice.uniform(DOM, 14)


def test_moment_bound_decaying_instance():
    p = _moment_model(4.0)
    assert beta(p) == pytest.approx(-1.0)
    space, lat = _moment_space()
    rho0 = np.zeros(len(space))
    rho0[space.index([space.mask_of([0, 5, 9])])[0]] = 1.0
    rep = moment_bound_check(space, lat, p, DOM, rho0, np.linspace(0, 2, 5))
    assert rep["holds"] and rep["status"] == "pass"
    assert rep["rows"][-1]["first_moment"] < rep["rows"][-1]["bound"]


def test_moment_bound_empty_start():
    space, lat = enumerate_space(3, 2), SiteLattice.uniform(DOM, 3)
    rep = moment_bound_check(space, lat, _moment_model(4.0), DOM, np.eye(len(space))[0], [0.0, 1.0])
    assert all(r["first_moment"] == 0.0 and r["bound"] == 0.0 for r in rep["rows"])


def test_moment_bound_critical_nonincreasing():
    p = _moment_model(2.0)
    assert beta(p) == pytest.approx(0.0, abs=1e-12)
    space, lat = _moment_space()
    rho0 = np.zeros(len(space))
    rho0[space.index([space.mask_of([1, 8])])[0]] = 1.0
    rep = moment_bound_check(space, lat, p, DOM, rho0, np.linspace(0, 2, 9))
    m = [r["first_moment"] for r in rep["rows"]]
    assert all(b <= a + 1e-8 for a, b in zip(m, m[1:]))
    assert rep["holds"]


def test_moment_guard_flags_truncation():
    p = ModelParams(0.1, 3.0, 0.0, KernelFunction.density("gaussian", 0.2), ZERO, ZERO, ZERO)
    space, lat = enumerate_space(3, 2), SiteLattice.uniform(DOM, 3)
    rep = moment_bound_check(space, lat, p, DOM, np.eye(len(space))[1], [0.0, 1.0])
    assert not rep["guard_ok"] and rep["status"] == "truncation-limited"


def test_first_moment():
    space = enumerate_space(3, 2)
    rho = np.full(len(space), 1 / 7)
    assert first_moment(space, rho) == pytest.approx((3 + 6) / 7)


# environment chain


def test_env_chain_validation():
    ch = EnvChain.one_site_glauber(3.0, [0.5])
    np.testing.assert_allclose(ch.mu, [0.25, 0.75])
    with pytest.raises(ValueError, match="not irreducible"):
        EnvChain.from_generator([EMPTY, EMPTY], [[0.0, 0.0], [1.0, -1.0]])
    with pytest.raises(ValueError):
        EnvChain.from_generator([EMPTY, EMPTY], [[-1.0, 2.0], [1.0, -1.0]])


def test_generator_csv(tmp_path, inst):
    space, lat, env = inst
    G = build_averaged_generator(space, lat, env, logistic(), DOM)
    G.to_csv(tmp_path / "g.csv", ["x=1"])
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[:2] == ["# x=1", "row,col,rate"]
    assert len(lines) - 2 == G.matrix.nnz
