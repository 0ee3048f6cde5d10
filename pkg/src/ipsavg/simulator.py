"""Event-driven simulation of the logistic system in a fast environment.

The kernel is an exact Gillespie loop over the joint (system, environment)
chain with incrementally maintained rate totals. Two execution backends
share one RNG stream definition, so a seed gives the same trajectory on
either of them (see ``ipsavg._backend``).

Lattice mode places offspring on the sites of a ``SiteLattice``: a parent at
site ``x`` sends its offspring to ``y`` with probability proportional to
``a_plus(x - y)``, and births onto occupied sites or beyond the population cap
are dropped. That is the same truncation as ``ipsavg.truncated``, so the
two can be compared exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from ._backend import default_backend, get_kernel
from .configuration import Configuration, Domain, pairwise_torus_distances
from .environment import EnvSpec, env_invariant_sample
from .logistic import ModelParams, averaged_params

EVENT_NAMES = ("births", "deaths", "suppressed", "env", "rejected")
AUDIT_EVERY = 10_000


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    record_times: tuple = ()
    max_population: int = 10_000
    seed: int = 0
    delta: float = 0.0

    def __post_init__(self):
        times = tuple(float(t) for t in (self.record_times or (self.horizon,)))
        object.__setattr__(self, "record_times", times)
        if not self.horizon >= 0:
            raise ValueError("horizon must be >= 0")
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("record_times must be sorted")
        if times and (times[0] < 0 or times[-1] > self.horizon):
            raise ValueError("record_times must lie in [0, horizon]")
        if self.max_population < 1:
            raise ValueError("max_population must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass
class Trajectory:
    record_times: tuple
    configurations: list
    env_counts: np.ndarray
    events: dict
    exploded: bool
    audit_max: float
    seed: str = ""
    sites: list | None = None

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(c) for c in self.configurations], dtype=np.int64)

    def at(self, t: float) -> Configuration:
        return self.configurations[_time_index(self.record_times, t)]


def _time_index(times, t: float) -> int:
    for i, s in enumerate(times):
        if s == t:
            return i
    raise ValueError(f"t={t} is not a record time")


def _kernel_arrays(p: ModelParams):
    ks = (p.a_plus, p.a_minus, p.kappa, p.psi)
    return (
        np.array([k.code for k in ks], dtype=np.int64),
        np.array([k.amplitude for k in ks], dtype=float),
        np.array([k.range for k in ks], dtype=float),
    )


def _initial(init, rng: np.random.Generator, dim: int) -> Configuration:
    conf = init(rng) if callable(init) else init
    if not isinstance(conf, Configuration):
        conf = Configuration(np.asarray(conf, dtype=float).reshape(-1, dim), dim=dim)
    return conf


def _rng_state(rng: np.random.Generator) -> np.ndarray:
    state = rng.integers(0, 2**64, size=4, dtype=np.uint64)
    if not state.any():
        state[0] = 1
    return state


def simulate_coupled(
    p: ModelParams,
    env: EnvSpec,
    init,
    cfg: SimConfig,
    dom: Domain,
    rng: np.random.Generator,
    lattice=None,
    gamma0: Configuration | None = None,
    backend: str | None = None,
    seed_label: str = "",
) -> Trajectory:
    """Simulate the system driven by the environment sped up by ``1 / env.epsilon``.

    ``init`` is a configuration or a callable ``rng -> Configuration``. The
    environment starts from ``gamma0`` if given, else from its invariant law.
    ``lattice`` (a ``SiteLattice``) switches to lattice mode; the population
    cap then acts as the truncation level.
    """
    if p.dim != dom.dim:
        raise ValueError("model and domain dimensions differ")
    eta0 = _initial(init, rng, dom.dim)
    if len(eta0) > cfg.max_population:
        raise ValueError("initial configuration exceeds max_population")
    gamma = gamma0 if gamma0 is not None else env_invariant_sample(env, dom, rng).gamma
    kcode, kamp, krange = _kernel_arrays(p)
    if lattice is not None:
        if lattice.dom != dom:
            raise ValueError("lattice lives on a different domain")
        init_sites = lattice.site_index(eta0.points)
        init_pos = lattice.sites[init_sites]
        W = lattice.dispersal_weights(p.a_plus)
        sites = np.ascontiguousarray(lattice.sites, dtype=float)
        wcum = np.ascontiguousarray(np.cumsum(W, axis=1))
        wsum = np.ascontiguousarray(wcum[:, -1])
    else:
        init_sites = np.zeros(0, dtype=np.int64)
        init_pos = eta0.points
        sites = np.zeros((0, dom.dim))
        wcum = np.zeros((0, 0))
        wsum = np.zeros(0)
    kernel = get_kernel(backend)
    out = kernel(
        dom.dim, float(dom.side), kcode, kamp, krange,
        float(p.m0), float(p.lambda0), float(cfg.delta),
        env.code, float(env.z), float(env.epsilon),
        np.ascontiguousarray(init_pos, dtype=float).reshape(-1, dom.dim),
        np.ascontiguousarray(init_sites, dtype=np.int64),
        np.ascontiguousarray(gamma.points, dtype=float).reshape(-1, dom.dim),
        sites, wcum, wsum,
        int(cfg.max_population), np.asarray(cfg.record_times, dtype=float), float(cfg.horizon),
        _rng_state(rng), AUDIT_EVERY,
    )
    confs = []
    for pts in out["positions"]:
        # unreached record times (explosion) stay empty
        confs.append(Configuration._trusted(np.zeros((0, dom.dim)) if pts is None else pts))
    return Trajectory(
        record_times=cfg.record_times,
        configurations=confs,
        env_counts=out["env_counts"],
        events=dict(zip(EVENT_NAMES, (int(v) for v in out["events"]))),
        exploded=bool(out["exploded"]),
        audit_max=float(out["audit_max"]),
        seed=seed_label,
        sites=out["sites"] if lattice is not None else None,
    )


def simulate_averaged(
    p: ModelParams,
    init,
    cfg: SimConfig,
    dom: Domain,
    rng: np.random.Generator,
    lattice=None,
    backend: str | None = None,
    seed_label: str = "",
) -> Trajectory:
    """Simulate the averaged system: constant rates ``m_bar`` and ``lambda_bar``, no environment.

    The averages use kernel masses over the torus, which is what a Poisson
    environment on the torus actually averages to.
    """
    q = averaged_params(p, dom)
    env = EnvSpec("frozen", 0.0, 1.0)
    return simulate_coupled(q, env, init, cfg, dom, rng, lattice, Configuration.empty(dom.dim), backend, seed_label)


def run_ensemble(simulate: Callable[[np.random.Generator, str], Trajectory], n: int, seed: int) -> list[Trajectory]:
    """Run ``n`` replicas with independent streams spawned from ``seed``.

    ``simulate(rng, label)`` runs one replica. Replica ``i`` always gets the
    ``i``-th child of ``SeedSequence(seed)``, so results do not depend on how
    replicas are scheduled.
    """
    if n < 1:
        raise ValueError("ensemble needs at least one replica")
    children = np.random.SeedSequence(seed).spawn(n)
    return [simulate(np.random.default_rng(c), f"{seed}:{i}") for i, c in enumerate(children)]


def _moments_at(ens: Sequence[Trajectory], t: float, k: int) -> np.ndarray:
    if not ens:
        raise ValueError("empty ensemble")
    i = _time_index(ens[0].record_times, t)
    return np.array([len(tr.configurations[i]) for tr in ens], dtype=float) ** k


def estimate_moment(ens: Sequence[Trajectory], t: float, k: int = 1, n_batches: int = 20) -> tuple[float, float]:
    """Mean of ``|eta_t|^k`` and a CI half-width of three standard errors.

    Replicas are independent, so the standard error comes from ``n_batches``
    batch means (plain per-replica error when the ensemble is smaller).
    """
    vals = _moments_at(ens, t, k)
    mean = float(vals.mean())
    if k == 0:
        return 1.0, 0.0
    n = len(vals)
    if n < 2:
        return mean, math.inf
    if n >= 2 * n_batches:
        usable = n - n % n_batches
        means = vals[:usable].reshape(n_batches, -1).mean(axis=1)
        se = float(means.std(ddof=1)) / math.sqrt(n_batches)
    else:
        se = float(vals.std(ddof=1)) / math.sqrt(n)
    return mean, 3.0 * se


def subwindow_count(conf: Configuration, dom: Domain) -> int:
    """Points in the corner box ``[0, L/2)^d``."""
    if len(conf) == 0:
        return 0
    return int(np.all(conf.points < dom.side / 2, axis=1).sum())


def mean_nn_distance(conf: Configuration, dom: Domain) -> float:
    """Mean nearest-neighbour torus distance; NaN with fewer than two points."""
    if len(conf) < 2:
        return math.nan
    d = pairwise_torus_distances(dom, conf.points, conf.points)
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())


OBSERVABLES = {
    "population": lambda c, dom: float(len(c)),
    "subwindow": lambda c, dom: float(subwindow_count(c, dom)),
    "nearest_neighbor": mean_nn_distance,
}


def observable_values(ens: Sequence[Trajectory], t: float, name: str, dom: Domain) -> np.ndarray:
    i = _time_index(ens[0].record_times, t)
    f = OBSERVABLES[name]
    vals = np.array([f(tr.configurations[i], dom) for tr in ens], dtype=float)
    return vals[np.isfinite(vals)]


def _distances(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    if len(a) == 0 or len(b) == 0:
        return math.nan, math.nan
    return float(stats.ks_2samp(a, b).statistic), float(stats.wasserstein_distance(a, b))


def compare_ensembles(
    A: Sequence[Trajectory],
    B: Sequence[Trajectory],
    t: float,
    dom: Domain,
    observables: Sequence[str] = tuple(OBSERVABLES),
    n_boot: int = 200,
    seed: int = 0,
) -> dict:
    """KS and Wasserstein-1 distances between the two ensembles at time ``t``.

    Each distance comes with a 95% percentile-bootstrap interval.
    """
    if not A or not B:
        raise ValueError("empty ensemble")
    if tuple(A[0].record_times) != tuple(B[0].record_times):
        raise ValueError("ensembles have mismatched record grids")
    rng = np.random.default_rng(seed)
    report = {}
    for name in observables:
        if name not in OBSERVABLES:
            raise ValueError(f"unknown observable {name!r}")
        a = observable_values(A, t, name, dom)
        b = observable_values(B, t, name, dom)
        ks, w1 = _distances(a, b)
        boot = np.full((n_boot, 2), np.nan)
        if len(a) and len(b):
            for j in range(n_boot):
                boot[j] = _distances(rng.choice(a, len(a)), rng.choice(b, len(b)))
        report[name] = {
            "ks": ks,
            "ks_ci": tuple(np.nanpercentile(boot[:, 0], [2.5, 97.5]).tolist()) if len(a) and len(b) else (math.nan,) * 2,
            "w1": w1,
            "w1_ci": tuple(np.nanpercentile(boot[:, 1], [2.5, 97.5]).tolist()) if len(a) and len(b) else (math.nan,) * 2,
            "ks_pvalue": float(stats.ks_2samp(a, b).pvalue) if len(a) and len(b) else math.nan,
            "n": (len(a), len(b)),
        }
    return report


def count_chi2(counts, probs, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Pearson chi-square of observed population counts against exact probabilities.

    Adjacent classes are pooled from the top until every expected count is at
    least ``min_expected``. Returns ``(statistic, p_value, degrees of freedom)``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    probs = np.asarray(probs, dtype=float)
    if np.any(counts < 0) or np.any(counts >= len(probs)):
        raise ValueError("observed count outside the support of probs")
    n = len(counts)
    obs = np.bincount(counts, minlength=len(probs)).astype(float)
    exp = probs / probs.sum() * n
    o_bins, e_bins = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(obs[::-1], exp[::-1]):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            o_bins.append(o_acc)
            e_bins.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if e_bins:
            o_bins[-1] += o_acc
            e_bins[-1] += e_acc
        else:
            o_bins.append(o_acc)
            e_bins.append(e_acc)
    if len(e_bins) < 2:
        return 0.0, 1.0, 0
    o_bins, e_bins = np.array(o_bins), np.array(e_bins)
    stat = float(((o_bins - e_bins) ** 2 / e_bins).sum())
    dof = len(e_bins) - 1
    return stat, float(stats.chi2.sf(stat, dof)), dof


def ensemble_rows(ens: Sequence[Trajectory], dom: Domain) -> list[dict]:
    rows = []
    for tr in ens:
        for t, conf, g in zip(tr.record_times, tr.configurations, tr.env_counts):
            rows.append({
                "seed": tr.seed,
                "t": t,
                "count": len(conf),
                "subwindow": subwindow_count(conf, dom),
                "nn_distance": mean_nn_distance(conf, dom),
                "env_count": int(g),
                "exploded": int(tr.exploded),
            })
    return rows


def write_ensemble_csv(path, ens: Sequence[Trajectory], dom: Domain, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        cols = ["seed", "t", "count", "subwindow", "nn_distance", "env_count", "exploded"]
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        for row in ensemble_rows(ens, dom):
            row["t"] = repr(row["t"])
            row["nn_distance"] = "" if math.isnan(row["nn_distance"]) else repr(row["nn_distance"])
            w.writerow(row)


def ensemble_summary(ens: Sequence[Trajectory]) -> dict:
    totals = {k: 0 for k in EVENT_NAMES}
    for tr in ens:
        for k, v in tr.events.items():
            totals[k] += v
    times = ens[0].record_times
    return {
        "replicas": len(ens),
        "exploded": sum(tr.exploded for tr in ens),
        "audit_max": max(tr.audit_max for tr in ens),
        "events": totals,
        "mean_count": {repr(t): estimate_moment(ens, t, 1)[0] for t in times},
        "backend": default_backend(),
    }


def summary_json(ens: Sequence[Trajectory]) -> str:
    return json.dumps(ensemble_summary(ens), indent=2, sort_keys=True)
