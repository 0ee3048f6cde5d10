"""Finite-state forward equations for the lattice-truncated logistic model.

Configurations are subsets of ``M`` lattice sites with at most ``N`` points,
indexed by size and then by bitmask value. With counting measure on this
finite space the forward (density) generator is the transpose of the
backward rate matrix, and all semigroups are matrix exponentials.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.integrate import solve_ivp
from scipy.stats import poisson

from .configuration import Configuration, Domain, pairwise_torus_distances
from .logistic import ModelParams, averaged_params, beta

MAX_SITES = 24
MAX_STATES = 10_000_000


@dataclass(frozen=True)
class SiteLattice:
    """Uniform grid of ``M`` sites on the torus; ``M`` must be a perfect ``d``-th power."""

    dom: Domain
    sites: np.ndarray

    @classmethod
    def uniform(cls, dom: Domain, M: int) -> "SiteLattice":
        if M < 1:
            raise ValueError("lattice needs at least one site")
        per_axis = round(M ** (1.0 / dom.dim))
        if per_axis**dom.dim != M:
            raise ValueError(f"M={M} is not a perfect power of dim={dom.dim}")
        axis = np.arange(per_axis) * (dom.side / per_axis)
        grids = np.meshgrid(*([axis] * dom.dim), indexing="ij")
        sites = np.stack([g.ravel() for g in grids], axis=1)
        sites.setflags(write=False)
        return cls(dom, sites)

    @property
    def M(self) -> int:
        return len(self.sites)

    @property
    def cell_volume(self) -> float:
        return self.dom.volume / self.M

    def distances(self) -> np.ndarray:
        return pairwise_torus_distances(self.dom, self.sites, self.sites)

    def dispersal_weights(self, a_plus) -> np.ndarray:
        """``W[x, y] = a_plus(x - y) * h^d``, the lattice quadrature of the dispersal law."""
        return a_plus(self.distances()) * self.cell_volume

    def site_index(self, points, atol: float = 1e-9) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dom.dim)
        if len(pts) == 0:
            return np.zeros(0, dtype=np.int64)
        d = pairwise_torus_distances(self.dom, pts, self.sites)
        idx = np.argmin(d, axis=1)
        if np.any(d[np.arange(len(pts)), idx] > atol):
            raise ValueError("configuration contains points off the lattice")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("configuration places two points on one site")
        return idx.astype(np.int64)

    def configuration(self, site_ids) -> Configuration:
        return Configuration(self.sites[np.asarray(site_ids, dtype=int)], dim=self.dom.dim)


class TruncatedSpace:
    """All subsets of ``M`` sites with at most ``N`` points, bijectively indexed."""

    def __init__(self, M: int, N: int):
        if not (0 <= N <= M <= MAX_SITES):
            raise ValueError(f"need 0 <= N <= M <= {MAX_SITES}, got M={M}, N={N}")
        size = sum(comb(M, k) for k in range(N + 1))
        if size > MAX_STATES:
            raise ValueError(f"truncation too large: {size} states")
        self.M, self.N = M, N
        all_masks = np.arange(1 << M, dtype=np.int64)
        pc = np.bitwise_count(all_masks).astype(np.int64)
        keep = pc <= N
        order = np.argsort(pc[keep], kind="stable")
        self.masks = all_masks[keep][order]
        self.sizes = pc[keep][order]
        self.offsets = np.array([sum(comb(M, j) for j in range(k)) for k in range(N + 2)], dtype=np.int64)
        self._binom = np.array([[comb(n, k) for k in range(M + 2)] for n in range(M + 1)], dtype=np.int64)
        self._bits = None

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def bits(self) -> np.ndarray:
        """``(size, M)`` occupation matrix."""
        if self._bits is None:
            self._bits = ((self.masks[:, None] >> np.arange(self.M)) & 1).astype(bool)
        return self._bits

    def index(self, masks) -> np.ndarray:
        """State index of each bitmask (colex rank within its size class)."""
        masks = np.asarray(masks, dtype=np.int64)
        scalar = masks.ndim == 0
        masks = np.atleast_1d(masks)
        rank = np.zeros(len(masks), dtype=np.int64)
        seen = np.zeros(len(masks), dtype=np.int64)
        for b in range(self.M):
            on = ((masks >> b) & 1).astype(bool)
            rank[on] += self._binom[b, seen[on] + 1]
            seen += on
        if np.any(seen > self.N):
            raise ValueError("mask has more than N points")
        out = self.offsets[seen] + rank
        return out[0] if scalar else out

    def mask_of(self, site_ids) -> int:
        m = 0
        for s in site_ids:
            m |= 1 << int(s)
        return m

    def sites_of(self, i: int) -> tuple[int, ...]:
        m = int(self.masks[i])
        return tuple(b for b in range(self.M) if (m >> b) & 1)


def enumerate_space(M: int, N: int) -> TruncatedSpace:
    return TruncatedSpace(M, N)


@dataclass
class SparseGenerator:
    """Sparse rate matrix.

    ``form="backward"``: row ``i`` holds the jump rates out of state ``i``
    (rows sum to <= 0). ``form="forward"``: the transpose, acting on
    densities (columns sum to <= 0).
    """

    matrix: sp.csr_matrix
    form: str = "backward"
    conservative: bool = True
    total_rate: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.form not in ("backward", "forward"):
            raise ValueError(f"unknown form {self.form!r}")
        self.matrix = sp.csr_matrix(self.matrix)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def backward_matrix(self) -> sp.csr_matrix:
        return self.matrix if self.form == "backward" else self.matrix.T.tocsr()

    def forward_matrix(self) -> sp.csr_matrix:
        return self.matrix if self.form == "forward" else self.matrix.T.tocsr()

    def adjoint(self) -> "SparseGenerator":
        other = "forward" if self.form == "backward" else "backward"
        return SparseGenerator(self.matrix.T.tocsr(), other, self.conservative, self.total_rate, dict(self.meta))

    def outflow(self) -> np.ndarray:
        return -self.matrix.diagonal()

    def balance(self) -> np.ndarray:
        """Row sums (backward) or column sums (forward); zero when conservative."""
        axis = 1 if self.form == "backward" else 0
        return np.asarray(self.matrix.sum(axis=axis)).ravel()

    def check(self, tol: float = 1e-12) -> list[str]:
        problems = []
        off = self.matrix - sp.diags(self.matrix.diagonal())
        if off.nnz and off.data.min() < 0:
            problems.append("negative off-diagonal rate")
        bal = self.balance()
        scale = max(1.0, float(np.abs(self.matrix.diagonal()).max(initial=0.0)))
        if np.any(bal > tol * scale):
            problems.append("balance exceeds zero: not sub-Markov")
        if self.conservative and np.any(np.abs(bal) > tol * scale):
            problems.append("conservative flag set but balance is nonzero")
        return problems

    def triplets(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def to_csv(self, path, header_lines=()) -> None:
        rows, cols, vals = self.triplets()
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["row", "col", "rate"])
            for r, c, v in zip(rows, cols, vals):
                w.writerow([int(r), int(c), repr(float(v))])


@dataclass
class EnvChain:
    """Finite environment chain: states, rate matrix ``Q`` (rows sum to 0), invariant law ``mu``."""

    states: list
    Q: np.ndarray
    mu: np.ndarray

    @classmethod
    def from_generator(cls, states, Q) -> "EnvChain":
        Q = np.asarray(Q, dtype=float)
        K = len(states)
        if Q.shape != (K, K):
            raise ValueError(f"Q has shape {Q.shape}, expected ({K}, {K})")
        off = Q - np.diag(np.diag(Q))
        if np.any(off < 0):
            raise ValueError("environment rates must be nonnegative off the diagonal")
        if np.any(np.abs(Q.sum(axis=1)) > 1e-12 * max(1.0, np.abs(Q).max())):
            raise ValueError("environment generator rows must sum to zero")
        A = np.vstack([Q.T, np.ones(K)])
        rhs = np.zeros(K + 1)
        rhs[-1] = 1.0
        mu = np.linalg.lstsq(A, rhs, rcond=None)[0]
        if np.any(mu <= 0) or not np.allclose(mu @ Q, 0.0, atol=1e-12):
            raise ValueError("environment chain is not irreducible")
        return cls(list(states), Q, mu / mu.sum())

    @classmethod
    def trivial(cls, gamma: Configuration) -> "EnvChain":
        return cls([gamma], np.zeros((1, 1)), np.ones(1))

    @classmethod
    def one_site_glauber(cls, z: float, w, dim: int = 1) -> "EnvChain":
        """Immigration-death on one site: empty <-> ``{w}`` with rates ``z`` and 1."""
        if z <= 0:
            raise ValueError("one-site chain needs z > 0")
        w = np.asarray(w, dtype=float).reshape(1, dim)
        states = [Configuration.empty(dim), Configuration(w, dim=dim)]
        return cls.from_generator(states, [[-z, z], [1.0, -1.0]])

    @property
    def K(self) -> int:
        return len(self.states)


def _gamma_points(gamma, dim: int) -> np.ndarray:
    if isinstance(gamma, Configuration):
        return gamma.points
    return np.asarray(gamma, dtype=float).reshape(-1, dim)


def build_system_generator(
    sp_: TruncatedSpace,
    lat: SiteLattice,
    gamma,
    p: ModelParams,
    dom: Domain,
    delta: float | None = None,
) -> SparseGenerator:
    """Backward rate matrix of the system on the truncated space, environment fixed at ``gamma``.

    Deaths remove a particle at rate ``death_rate * exp(-delta q)``; a birth
    onto empty site ``y`` happens at rate
    ``sum_x fecundity(x) a_plus(x - y) h^d * exp(-delta q)``. Births onto
    occupied sites or beyond ``N`` points are dropped, so rows still sum to
    zero. ``q`` is the untruncated total rate of the state.
    """
    delta = p.delta if delta is None else delta
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if lat.M != sp_.M:
        raise ValueError("lattice and truncated space disagree on M")
    bits = sp_.bits.astype(float)
    gam = _gamma_points(gamma, dom.dim)
    if len(gam):
        dg = pairwise_torus_distances(dom, lat.sites, gam)
        env_m = p.m0 + p.kappa(dg).sum(axis=1)
        env_l = p.lambda0 + p.psi(dg).sum(axis=1)
    else:
        env_m = np.full(lat.M, p.m0)
        env_l = np.full(lat.M, p.lambda0)
    dist = lat.distances()
    a_minus = p.a_minus(dist)
    np.fill_diagonal(a_minus, 0.0)
    W = lat.dispersal_weights(p.a_plus)

    death = bits * (env_m[None, :] + bits @ a_minus)
    fec = bits * env_l[None, :]
    q = death.sum(axis=1) + fec.sum(axis=1)
    damp = np.exp(-delta * q)
    can_grow = (sp_.sizes < sp_.N)[:, None]
    birth = (fec @ W) * (1.0 - bits) * can_grow

    S = len(sp_)
    one = np.int64(1)
    rows, cols, vals = [], [], []
    for x in range(sp_.M):
        src = np.flatnonzero(death[:, x] > 0)
        if len(src):
            rows.append(src)
            cols.append(sp_.index(sp_.masks[src] ^ (one << x)))
            vals.append(death[src, x] * damp[src])
        src = np.flatnonzero(birth[:, x] > 0)
        if len(src):
            rows.append(src)
            cols.append(sp_.index(sp_.masks[src] | (one << x)))
            vals.append(birth[src, x] * damp[src])
    if rows:
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    off = sp.csr_matrix((v, (r, c)), shape=(S, S))
    out = np.asarray(off.sum(axis=1)).ravel()
    mat = (off - sp.diags(out)).tocsr()
    mat.eliminate_zeros()
    return SparseGenerator(mat, "backward", True, q, {"delta": delta})


def build_joint_generator(
    sp_: TruncatedSpace,
    lat: SiteLattice,
    env: EnvChain,
    p: ModelParams,
    dom: Domain,
    epsilon: float,
    delta: float | None = None,
) -> SparseGenerator:
    """Forward generator on ``(environment state, configuration)`` pairs.

    State ``(k, eta)`` has index ``k * |space| + eta``. Diagonal blocks are
    the forward system generators for each environment state; the coupling
    is ``(1/epsilon) Q_E^T`` tensored with the identity.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    blocks = [build_system_generator(sp_, lat, g, p, dom, delta).forward_matrix() for g in env.states]
    sys_part = sp.block_diag(blocks, format="csr")
    env_part = sp.kron(sp.csr_matrix(env.Q.T), sp.identity(len(sp_), format="csr"), format="csr")
    G = (sys_part + env_part / epsilon).tocsr()
    return SparseGenerator(G, "forward", True, None, {"epsilon": epsilon, "K": env.K})


def build_averaged_generator(
    sp_: TruncatedSpace,
    lat: SiteLattice,
    env: EnvChain,
    p: ModelParams,
    dom: Domain,
    delta: float | None = None,
) -> SparseGenerator:
    """Forward generator with rates averaged over ``env.mu``.

    Each environment state's rates are damped with its own total rate before
    averaging, i.e. the average of the damped kernel.
    """
    parts = [build_system_generator(sp_, lat, g, p, dom, delta) for g in env.states]
    G = sum(w * g.matrix for w, g in zip(env.mu, parts))
    q_bar = sum(w * g.total_rate for w, g in zip(env.mu, parts))
    bwd = SparseGenerator(sp.csr_matrix(G), "backward", True, q_bar, {"delta": parts[0].meta["delta"]})
    return bwd.adjoint()


def _as_density(rho0, n: int) -> np.ndarray:
    rho = np.asarray(rho0, dtype=float).ravel()
    if rho.shape != (n,):
        raise ValueError(f"density has length {rho.size}, generator has dimension {n}")
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    if rho.sum() > 1.0 + 1e-12:
        raise ValueError("density mass exceeds 1")
    return rho


class EvolveError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved residual {residual:.3g})")
        self.residual = residual


def _uniformization(A: sp.csr_matrix, rho: np.ndarray, t: float, tol: float, max_terms: int) -> np.ndarray:
    lam = float(np.max(-A.diagonal(), initial=0.0))
    if lam == 0.0 or t == 0.0:
        return rho.copy()
    P = (sp.identity(A.shape[0], format="csr") + A / lam).tocsr()
    n_steps = max(1, math.ceil(lam * t / 50.0))
    a = lam * t / n_steps
    step_tol = tol / n_steps
    K = int(poisson.isf(step_tol, a)) + 1
    if K * n_steps > max_terms:
        # best achievable with the term cap
        k_cap = max_terms // n_steps
        raise EvolveError("uniformization term cap reached", float(poisson.sf(k_cap, a) * n_steps))
    w = poisson.pmf(np.arange(K + 1), a)
    # renormalizing the truncated weights keeps mass exactly for a stochastic P
    w /= w.sum()
    v = rho
    for _ in range(n_steps):
        acc = w[0] * v
        term = v
        for k in range(1, K + 1):
            term = P @ term
            acc += w[k] * term
        v = acc
    return v


def evolve(
    rho0,
    G: SparseGenerator,
    t: float,
    method: str = "uniformization",
    tol: float = 1e-10,
    max_terms: int = 50_000_000,
) -> np.ndarray:
    """``exp(t G) rho0`` for a forward generator ``G``."""
    A = G.forward_matrix()
    rho = _as_density(rho0, A.shape[0])
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0 or A.nnz == 0:
        return rho.copy()
    if method == "uniformization":
        return _uniformization(A, rho, t, tol, max_terms)
    if method == "rk_adaptive":
        sol = solve_ivp(lambda _, y: A @ y, (0.0, t), rho, method="DOP853", rtol=tol, atol=tol * 1e-3)
        if not sol.success:
            raise EvolveError(f"adaptive integration failed: {sol.message}", math.nan)
        return sol.y[:, -1]
    if method == "dense":
        return dense_evolve(rho, G, t)
    raise ValueError(f"unknown method {method!r}")


def evolve_grid(rho0, G: SparseGenerator, t_grid, method: str = "uniformization", tol: float = 1e-10) -> np.ndarray:
    """Densities at each time of the sorted ``t_grid`` (rows), stepping incrementally."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0) or (len(t_grid) and t_grid[0] < 0):
        raise ValueError("t_grid must be sorted and nonnegative")
    out = np.empty((len(t_grid), G.dimension))
    rho = np.asarray(rho0, dtype=float)
    t_prev = 0.0
    for i, t in enumerate(t_grid):
        rho = evolve(np.clip(rho, 0.0, None) if method != "dense" else rho, G, t - t_prev, method,
                     tol / max(1, len(t_grid)))
        out[i] = rho
        t_prev = t
    return out


def dense_evolve(rho0, G: SparseGenerator, t: float) -> np.ndarray:
    """Reference ``expm(t G) rho0`` through a dense matrix exponential."""
    return linalg.expm(t * G.forward_matrix().toarray()) @ np.asarray(rho0, dtype=float)


def dense_evolve_grid(rho0, G: SparseGenerator, t_grid) -> np.ndarray:
    A = G.forward_matrix().toarray()
    rho0 = np.asarray(rho0, dtype=float)
    return np.array([linalg.expm(t * A) @ rho0 for t in t_grid])


def joint_initial(rho0, env: EnvChain) -> np.ndarray:
    """Environment-independent initial density: mass ``rho0(eta) mu_k`` at ``(k, eta)``."""
    return np.kron(env.mu, np.asarray(rho0, dtype=float))


def averaging_errors_from(joint: np.ndarray, averaged: np.ndarray, env: EnvChain) -> tuple[np.ndarray, np.ndarray]:
    """Per-time L1(lambda x mu) error and marginal total-variation error.

    ``joint`` has shape ``(T, K * S)``, ``averaged`` shape ``(T, S)``.
    """
    T, S = averaged.shape
    p = joint.reshape(T, env.K, S)
    err = np.abs(p - env.mu[None, :, None] * averaged[:, None, :]).sum(axis=(1, 2))
    tv = np.abs(p.sum(axis=1) - averaged).sum(axis=1)
    return err, tv


def averaging_error(
    sp_: TruncatedSpace,
    lat: SiteLattice,
    env: EnvChain,
    p: ModelParams,
    dom: Domain,
    eps_list,
    delta: float,
    t_grid,
    rho0,
    method: str = "uniformization",
    tol: float = 1e-10,
) -> list[dict]:
    """Distance between the joint (fast environment) and averaged evolutions.

    One row per ``(epsilon, t)`` with the L1(lambda x mu) error, its supremum
    over ``t_grid`` and the total-variation error of the system marginal.
    """
    G_bar = build_averaged_generator(sp_, lat, env, p, dom, delta)
    avg = evolve_grid(rho0, G_bar, t_grid, method, tol)
    p0 = joint_initial(rho0, env)
    rows = []
    for eps in eps_list:
        G = build_joint_generator(sp_, lat, env, p, dom, eps, delta)
        joint = evolve_grid(p0, G, t_grid, method, tol)
        err, tv = averaging_errors_from(joint, avg, env)
        sup = float(err.max())
        for t, e, v in zip(t_grid, err, tv):
            rows.append({"epsilon": float(eps), "t": float(t), "error": float(e), "sup_error": sup, "tv_error": float(v)})
    return rows


def delta_error(
    sp_: TruncatedSpace,
    lat: SiteLattice,
    env: EnvChain,
    p: ModelParams,
    dom: Domain,
    delta_list,
    t_grid,
    rho0,
    method: str = "uniformization",
    tol: float = 1e-10,
) -> list[dict]:
    """L1 distance between the damped and undamped averaged evolutions."""
    ref = evolve_grid(rho0, build_averaged_generator(sp_, lat, env, p, dom, 0.0), t_grid, method, tol)
    rows = []
    for d in delta_list:
        cur = evolve_grid(rho0, build_averaged_generator(sp_, lat, env, p, dom, d), t_grid, method, tol)
        err = np.abs(cur - ref).sum(axis=1)
        sup = float(err.max())
        for t, e in zip(t_grid, err):
            rows.append({"delta": float(d), "t": float(t), "error": float(e), "sup_error": sup})
    return rows


def operator_norm_check(G_fwd: SparseGenerator, delta: float, tol: float = 1e-12) -> dict:
    """Induced L1 norm (max absolute column sum) of a forward generator against ``2 / (e delta)``."""
    if delta <= 0:
        raise ValueError("bound vacuous for delta <= 0")
    A = G_fwd.forward_matrix()
    col = np.asarray(abs(A).sum(axis=0)).ravel()
    norm = float(col.max(initial=0.0))
    bound = 2.0 / (math.e * delta)
    return {"norm": norm, "bound": bound, "pass": norm <= bound + tol}


def first_moment(sp_: TruncatedSpace, rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho) @ sp_.sizes.astype(float)


def moment_bound_check(
    sp_: TruncatedSpace,
    lat: SiteLattice,
    p: ModelParams,
    dom: Domain,
    rho0,
    t_grid,
    env: EnvChain | None = None,
    tol: float = 1e-8,
    guard: float = 1e-6,
) -> dict:
    """First-moment bound ``sum |eta| rho_t <= exp(beta t) sum |eta| rho_0`` for the averaged model.

    Without ``env`` the environment is Poisson(z) and the averaged rates are
    the constants ``m_bar``, ``lambda_bar``; with an ``EnvChain`` they are
    averaged over its invariant law. Mass on the two outermost size classes
    must stay below ``guard``; otherwise the result is flagged
    ``truncation-limited`` rather than failed.
    """
    if env is None:
        G = build_system_generator(sp_, lat, Configuration.empty(dom.dim), averaged_params(p), dom, 0.0).adjoint()
        b = beta(p)
    else:
        G = build_averaged_generator(sp_, lat, env, p, dom, 0.0)
        b = beta(p)
    rho0 = _as_density(rho0, len(sp_))
    rhos = evolve_grid(rho0, G, t_grid, "uniformization", tol)
    m0 = float(first_moment(sp_, rho0))
    rows = []
    ok = True
    boundary = sp_.sizes >= sp_.N - 1
    guard_mass = float(rhos[:, boundary].sum(axis=1).max(initial=0.0))
    for t, rho in zip(t_grid, rhos):
        lhs = float(first_moment(sp_, rho))
        rhs = math.exp(b * t) * m0
        holds = lhs <= rhs + tol * max(1.0, m0)
        ok &= holds
        rows.append({"t": float(t), "first_moment": lhs, "bound": rhs, "holds": bool(holds)})
    guard_ok = guard_mass < guard
    status = "pass" if ok and guard_ok else ("truncation-limited" if not guard_ok else "fail")
    off_site = lat.dispersal_weights(p.a_plus)
    np.fill_diagonal(off_site, 0.0)
    return {
        "beta": b,
        "rows": rows,
        "holds": bool(ok),
        "guard_mass": guard_mass,
        "guard_ok": bool(guard_ok),
        "status": status,
        "max_offsite_dispersal": float(off_site.sum(axis=1).max(initial=0.0)),
    }
