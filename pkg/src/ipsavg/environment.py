"""Ergodic environment processes on the torus with Poisson(z) invariant law.

Three dynamics are provided, all sped up by the factor ``1 / epsilon``:

* ``free_glauber``: immigration-death. Points arrive at total rate
  ``z * volume`` at uniform locations and each point dies at unit rate.
  Poisson(z) is reversible for it.
* ``resample``: at rate 1 the whole configuration is replaced by a fresh
  Poisson(z) sample. Mixes completely in one event.
* ``frozen``: no events. Non-ergodic, used as the quenched control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .configuration import Configuration, Domain, sample_poisson

KINDS = ("free_glauber", "resample", "frozen")
KIND_CODES = {name: i for i, name in enumerate(KINDS)}


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    z: float
    epsilon: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}; expected one of {KINDS}")
        if not (self.z >= 0 and math.isfinite(self.z)):
            raise ValueError(f"z must be >= 0, got {self.z!r}")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    def to_json(self) -> dict:
        return {"kind": self.kind, "z": self.z, "epsilon": self.epsilon}

    @classmethod
    def from_json(cls, data: dict) -> "EnvSpec":
        return cls(str(data["kind"]), float(data["z"]), float(data.get("epsilon", 1.0)))


@dataclass(frozen=True)
class EnvState:
    gamma: Configuration
    clock: float = 0.0


def env_invariant_sample(spec: EnvSpec, dom: Domain, rng: np.random.Generator) -> EnvState:
    """Draw the environment from its invariant Poisson(z) law, clock at zero."""
    return EnvState(sample_poisson(dom, spec.z, rng), 0.0)


def env_event_rate(n_points: int, spec: EnvSpec, dom: Domain) -> float:
    if spec.kind == "free_glauber":
        return (spec.z * dom.volume + n_points) / spec.epsilon
    if spec.kind == "resample":
        return 1.0 / spec.epsilon
    return 0.0


def env_step(state: EnvState, spec: EnvSpec, dom: Domain, rng: np.random.Generator) -> tuple[float, EnvState]:
    """Advance to the next environment event.

    Returns ``(dt, new_state)``. A state with no possible events (frozen, or
    free Glauber with ``z = 0`` and no points) gives ``dt = inf`` and the
    unchanged state.
    """
    gamma = state.gamma
    rate = env_event_rate(len(gamma), spec, dom)
    if rate == 0.0:
        return math.inf, state
    dt = rng.exponential(1.0 / rate)
    if spec.kind == "resample":
        new = sample_poisson(dom, spec.z, rng)
    else:
        immigration = spec.z * dom.volume
        if rng.uniform() * (immigration + len(gamma)) < immigration:
            x = rng.uniform(0.0, dom.side, size=(1, dom.dim))
            new = Configuration._trusted(np.vstack([gamma.points, x]))
        else:
            i = rng.integers(len(gamma))
            new = Configuration._trusted(np.delete(gamma.points, i, axis=0))
    return dt, EnvState(new, state.clock + dt)


def env_trajectory(spec: EnvSpec, dom: Domain, T: float, rng: np.random.Generator, state: EnvState | None = None):
    """Yield ``(t_start, t_end, gamma)`` holding intervals covering ``[0, T]``."""
    if state is None:
        state = env_invariant_sample(spec, dom, rng)
    t = 0.0
    while t < T:
        dt, new = env_step(state, spec, dom, rng)
        t_next = min(t + dt, T)
        yield t, t_next, state.gamma
        t = t_next
        state = new


def env_ergodic_average(
    f: Callable[[Configuration], float],
    spec: EnvSpec,
    dom: Domain,
    T: float,
    rng: np.random.Generator,
    n_batches: int = 20,
) -> tuple[float, float]:
    """Time average ``(1/T) int_0^T f(gamma_t) dt`` and a batch-means CI half-width.

    The process starts from its invariant law. The half-width is three
    standard errors of the ``n_batches`` equal-length batch means.
    """
    if spec.kind == "frozen":
        raise ValueError("non-ergodic environment: frozen dynamics has no time average")
    if not T > 0:
        raise ValueError("T must be positive")
    edges = np.linspace(0.0, T, n_batches + 1)
    acc = np.zeros(n_batches)
    for t0, t1, gamma in env_trajectory(spec, dom, T, rng):
        val = float(f(gamma))
        # spread the holding interval over the batches it overlaps
        b0 = min(int(np.searchsorted(edges, t0, side="right")) - 1, n_batches - 1)
        b = b0
        while b < n_batches and edges[b] < t1:
            lo, hi = max(t0, edges[b]), min(t1, edges[b + 1])
            if hi > lo:
                acc[b] += val * (hi - lo)
            b += 1
    means = acc / np.diff(edges)
    avg = float(acc.sum() / T)
    ci = 3.0 * float(np.std(means, ddof=1)) / math.sqrt(n_batches)
    return avg, ci


def env_event_count(spec: EnvSpec, dom: Domain, T: float, rng: np.random.Generator) -> int:
    """Number of environment events in ``[0, T]`` started from the invariant law."""
    state = env_invariant_sample(spec, dom, rng)
    t, n = 0.0, 0
    while True:
        dt, state = env_step(state, spec, dom, rng)
        t += dt
        if t > T:
            return n
        n += 1
