"""Minimal sub-stochastic semigroups on finite truncations.

A generator is split as ``-q + B``: ``q`` the total outflow rate of each
state and ``B`` the (forward, column-indexed) jump kernel with column sums at
most ``q``. A column sum below ``q`` is mass that leaves to a cemetery, which
is how a truncation records flow through its boundary. Growing a nested
family of truncations and watching the lost mass tells whether the limit
process keeps all its mass (no explosion) up to a given time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import linalg


@dataclass
class SplitGenerator:
    q: np.ndarray
    B: sp.csr_matrix

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.B = sp.csr_matrix(self.B, dtype=float)
        n = len(self.q)
        if self.B.shape != (n, n):
            raise ValueError(f"B has shape {self.B.shape}, expected ({n}, {n})")
        if np.any(self.q < 0):
            raise ValueError("total rates must be nonnegative")
        if self.B.nnz and self.B.data.min() < 0:
            raise ValueError("jump kernel must be nonnegative")
        if np.any(self.B.diagonal() != 0):
            raise ValueError("jump kernel must vanish on the diagonal")
        if np.any(self.column_mass() > self.q * (1 + 1e-12) + 1e-300):
            raise ValueError("jump kernel column sums exceed total rates")

    @classmethod
    def from_forward(cls, G) -> "SplitGenerator":
        """Split a forward generator (columns sum to <= 0)."""
        G = sp.csr_matrix(G, dtype=float)
        q = -G.diagonal()
        B = (G + sp.diags(q)).tocsr()
        B.eliminate_zeros()
        return cls(q, B)

    def __len__(self) -> int:
        return len(self.q)

    def column_mass(self) -> np.ndarray:
        return np.asarray(self.B.sum(axis=0)).ravel()

    def leak(self) -> np.ndarray:
        """Rate at which each state loses mass to the cemetery."""
        return np.clip(self.q - self.column_mass(), 0.0, None)

    @property
    def conservative(self) -> bool:
        return bool(np.all(self.leak() <= 1e-12 * np.maximum(self.q, 1.0)))

    def forward_matrix(self) -> sp.csr_matrix:
        return (self.B - sp.diags(self.q)).tocsr()


def resolvent_series(sg: SplitGenerator, a: float, r: float, nu, n_terms: int) -> np.ndarray:
    """Partial sum ``R sum_{n <= n_terms} r^n (B R)^n nu`` with ``R = diag(1 / (a + q))``."""
    if not a > 0:
        raise ValueError("a must be positive")
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0):
        raise ValueError("nu must be nonnegative")
    R = 1.0 / (a + sg.q)
    term = nu.copy()
    acc = nu.copy()
    for _ in range(n_terms):
        term = r * (sg.B @ (R * term))
        acc += term
    return R * acc


def series_tail_bound(sg: SplitGenerator, a: float, r: float, nu, n_terms: int) -> float:
    """Upper bound on the L1 mass of the terms beyond ``n_terms``.

    ``B R`` contracts L1 by ``c = max_j colmass_j / (a + q_j) <= max q / (a + max q) < 1``.
    """
    colmass = sg.column_mass()
    c = r * float(np.max(colmass / (a + sg.q), initial=0.0))
    norm_nu = float(np.sum(nu))
    if c >= 1.0:
        return math.inf
    return norm_nu / a * c ** (n_terms + 1) / (1.0 - c)


def dense_resolvent(sg: SplitGenerator, a: float, nu) -> np.ndarray:
    """``(a I - G)^{-1} nu`` by a dense solve."""
    G = sg.forward_matrix().toarray()
    return linalg.solve(a * np.eye(len(sg)) - G, np.asarray(nu, dtype=float))


def birth_death_chain(N: int, birth: Callable[[int], float], death: Callable[[int], float]) -> SplitGenerator:
    """Population counts ``0..N``; births out of ``N`` leak to the cemetery."""
    if N < 0:
        raise ValueError("N must be >= 0")
    n = np.arange(N + 1)
    b = np.array([birth(int(k)) for k in n], dtype=float)
    d = np.array([death(int(k)) for k in n], dtype=float)
    d[0] = 0.0
    if np.any(b < 0) or np.any(d < 0):
        raise ValueError("rates must be nonnegative")
    up = sp.diags(b[:-1], -1, shape=(N + 1, N + 1))
    down = sp.diags(d[1:], 1, shape=(N + 1, N + 1))
    return SplitGenerator(b + d, (up + down).tocsr())


def linear_birth_death(N: int, lam: float, mu: float) -> SplitGenerator:
    return birth_death_chain(N, lambda k: lam * k, lambda k: mu * k)


def quadratic_pure_birth(N: int) -> SplitGenerator:
    """Rates ``q_n = n^2``; the sum of ``1 / q_n`` is finite, so the chain explodes."""
    return birth_death_chain(N, lambda k: float(k * k), lambda k: 0.0)


def _is_nested(small: SplitGenerator, big: SplitGenerator) -> bool:
    n = len(small)
    if n > len(big):
        return False
    if not np.array_equal(small.q, big.q[:n]):
        return False
    return (abs(small.B - big.B[:n, :n])).sum() == 0


def mass_defect(sg: SplitGenerator, t: float, init: int) -> float:
    rho = linalg.expm(t * sg.forward_matrix().toarray())[:, init]
    return float(max(0.0, 1.0 - rho.sum()))


def stochasticity_probe(family: Sequence[SplitGenerator], t: float, init: int = 0, tol: float = 1e-6) -> dict:
    """Mass defect ``1 - |rho_t|`` on each truncation of a nested family.

    Defects are nonincreasing in the truncation size. The verdict is
    ``"stochastic"`` when the largest truncation loses less than ``tol`` and
    ``"possible explosion"`` otherwise; it extrapolates from finitely many
    truncations and proves nothing.
    """
    if not family:
        raise ValueError("empty truncation family")
    sizes = [len(g) for g in family]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("truncations must strictly grow")
    for small, big in zip(family, family[1:]):
        if not _is_nested(small, big):
            raise ValueError("truncations are not nested")
    if not 0 <= init < sizes[0]:
        raise ValueError("init state outside the smallest truncation")
    defects = [mass_defect(g, t, init) for g in family]
    extrapolated = defects[-1]
    if len(defects) >= 3:
        d0, d1, d2 = defects[-3:]
        denom = d2 - 2 * d1 + d0
        if abs(denom) > 1e-300:
            extrapolated = d2 - (d2 - d1) ** 2 / denom
        extrapolated = min(max(extrapolated, 0.0), defects[-1])
    monotone = all(b <= a + 1e-12 for a, b in zip(defects, defects[1:]))
    return {
        "sizes": sizes,
        "t": t,
        "defects": defects,
        "extrapolated_defect": extrapolated,
        "monotone": monotone,
        "tolerance": tol,
        "verdict": "stochastic" if defects[-1] < tol else "possible explosion",
    }


def write_defect_csv(path, report: dict, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["N", "t", "defect"])
        for n, d in zip(report["sizes"], report["defects"]):
            w.writerow([n - 1, repr(float(report["t"])), repr(float(d))])
