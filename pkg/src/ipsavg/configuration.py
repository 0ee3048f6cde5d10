"""Finite point configurations on a periodic box.

Configurations live on the torus ``[0, L)^d``. The Lebesgue-Poisson measure
on finite configurations is sigma-finite, so integrals against it are
estimated by reweighting samples of the unit-intensity Poisson process on
the window: ``int_{Gamma_L} G dlambda = exp(|L|) * E_{pi_1}[G]``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MAX_SUBSET_SIZE = 25


@dataclass(frozen=True)
class Domain:
    """Periodic box ``[0, side)^dim``."""

    dim: int
    side: float

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim!r}")
        if not (self.side > 0 and math.isfinite(self.side)):
            raise ValueError(f"side must be positive and finite, got {self.side!r}")

    @property
    def volume(self) -> float:
        return float(self.side) ** self.dim

    def wrap(self, x):
        return np.mod(np.asarray(x, dtype=float), self.side)

    def to_json(self) -> dict:
        return {"dim": self.dim, "side": self.side}

    @classmethod
    def from_json(cls, data: dict) -> "Domain":
        return cls(dim=int(data["dim"]), side=float(data["side"]))


def _as_point(dom: Domain, x) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (dom.dim,):
        raise ValueError(f"point has shape {arr.shape}, domain has dim {dom.dim}")
    return arr


def torus_displacement(dom: Domain, x, y) -> np.ndarray:
    """Minimum-image displacement ``x - y`` (broadcasts over leading axes)."""
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return diff - dom.side * np.round(diff / dom.side)


def torus_distance(dom: Domain, x, y) -> float:
    """Minimum-image Euclidean distance between two points of ``dom``."""
    x = _as_point(dom, x)
    y = _as_point(dom, y)
    d = torus_displacement(dom, x, y)
    return float(math.sqrt(float(np.dot(d, d))))


def pairwise_torus_distances(dom: Domain, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of minimum-image distances between rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=float).reshape(-1, dom.dim)
    b = np.asarray(b, dtype=float).reshape(-1, dom.dim)
    d = torus_displacement(dom, a[:, None, :], b[None, :, :])
    return np.sqrt(np.sum(d * d, axis=-1))


class Configuration:
    """A finite simple point set in a torus, stored as an ``(n, d)`` array.

    Points keep their insertion order so iteration is deterministic. The
    array is read-only; operations that change a configuration return a new
    one.
    """

    __slots__ = ("_points", "tolerance")

    def __init__(self, points, dim: int | None = None, tolerance: float = 0.0):
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            if dim is None:
                dim = pts.shape[1] if pts.ndim == 2 else 1
            pts = np.zeros((0, dim))
        elif pts.ndim == 1:
            pts = pts.reshape(-1, 1) if (dim in (None, 1)) else pts.reshape(-1, dim)
        if dim is not None and pts.shape[1] != dim:
            raise ValueError(f"points have dim {pts.shape[1]}, expected {dim}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("configuration contains non-finite coordinates")
        if tolerance < 0:
            raise ValueError("simplicity tolerance must be >= 0")
        pts = pts.copy()
        pts.setflags(write=False)
        self._points = pts
        self.tolerance = float(tolerance)
        self._check_simple()

    def _check_simple(self):
        n = len(self._points)
        if n < 2:
            return
        if self.tolerance == 0.0:
            if len(np.unique(self._points, axis=0)) != n:
                raise ValueError("configuration is not simple: duplicate points")
            return
        diff = self._points[:, None, :] - self._points[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        iu = np.triu_indices(n, k=1)
        if np.any(dist[iu] < self.tolerance):
            raise ValueError("configuration is not simple: points closer than tolerance")

    @classmethod
    def _trusted(cls, pts: np.ndarray, tolerance: float = 0.0) -> "Configuration":
        # Caller guarantees a simple, finite (n, d) array.
        obj = cls.__new__(cls)
        pts = pts.copy()
        pts.setflags(write=False)
        obj._points = pts
        obj.tolerance = tolerance
        return obj

    @classmethod
    def empty(cls, dim: int) -> "Configuration":
        return cls(np.zeros((0, dim)), dim=dim)

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    def __len__(self) -> int:
        return len(self._points)

    def __iter__(self):
        return iter(self._points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return self._points.shape == other._points.shape and bool(
            np.array_equal(self._points, other._points)
        )

    def __repr__(self) -> str:
        return f"Configuration(n={len(self)}, dim={self.dim})"

    def subset(self, index) -> "Configuration":
        return Configuration._trusted(self._points[np.asarray(index, dtype=int)], self.tolerance)

    def union(self, other: "Configuration") -> "Configuration":
        return Configuration(np.vstack([self._points, other._points]), dim=self.dim)

    def to_json(self) -> list:
        return self._points.tolist()

    @classmethod
    def from_json(cls, data: Sequence, dim: int) -> "Configuration":
        return cls(np.asarray(data, dtype=float).reshape(-1, dim), dim=dim)


def sample_poisson(dom: Domain, intensity: float, rng: np.random.Generator) -> Configuration:
    """Poisson point process of the given intensity on the torus."""
    if not intensity >= 0:
        raise ValueError(f"intensity must be >= 0, got {intensity!r}")
    n = rng.poisson(intensity * dom.volume) if intensity > 0 else 0
    # Continuous coordinates collide with probability zero.
    return Configuration._trusted(rng.uniform(0.0, dom.side, size=(n, dom.dim)))


def sample_poisson_batch(dom: Domain, intensity: float, n: int, rng: np.random.Generator) -> list[Configuration]:
    """``n`` independent Poisson configurations, drawn in bulk."""
    if not intensity >= 0:
        raise ValueError(f"intensity must be >= 0, got {intensity!r}")
    counts = rng.poisson(intensity * dom.volume, size=n) if intensity > 0 else np.zeros(n, dtype=np.int64)
    pts = rng.uniform(0.0, dom.side, size=(int(counts.sum()), dom.dim))
    return [Configuration._trusted(c) for c in np.split(pts, np.cumsum(counts)[:-1])]


def _mean_and_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def lp_expectation(
    G: Callable[[Configuration], float],
    dom: Domain,
    n_samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte Carlo estimate of ``int G dlambda`` over configurations in ``dom``.

    Returns ``(estimate, std_error)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    weight = math.exp(dom.volume)
    vals = np.empty(n_samples)
    for i, eta in enumerate(sample_poisson_batch(dom, 1.0, n_samples, rng)):
        v = float(G(eta))
        if not math.isfinite(v):
            raise ValueError(f"G returned non-finite value {v!r} on configuration {eta.to_json()}")
        vals[i] = v
    mean, se = _mean_and_se(vals)
    return weight * mean, weight * se


@dataclass
class IBPReport:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    combined_error: float
    passed: bool
    window_volume: float

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "lhs_se": self.lhs_se,
            "rhs_se": self.rhs_se,
            "combined_error": self.combined_error,
            "pass": self.passed,
            "window_volume": self.window_volume,
        }


def subset_sum(G: Callable[[Configuration, Configuration], float], eta: Configuration) -> float:
    """``sum_{xi subset eta} G(xi, eta minus xi)`` by explicit enumeration."""
    n = len(eta)
    if n > MAX_SUBSET_SIZE:
        raise ValueError(f"subset sum over |eta|={n} > {MAX_SUBSET_SIZE} is infeasible")
    pts = eta.points
    total = 0.0
    for inside, outside in _splits(n):
        total += float(G(Configuration._trusted(pts[inside]), Configuration._trusted(pts[outside])))
    return total


@functools.lru_cache(maxsize=None)
def _splits(n: int) -> tuple:
    idx = np.arange(n)
    out = []
    for mask in range(1 << n):
        inside = ((mask >> idx) & 1).astype(bool)
        out.append((idx[inside], idx[~inside]))
    return tuple(out)


def verify_ibp(
    G: Callable[[Configuration, Configuration], float],
    dom: Domain,
    n_samples: int,
    rng: np.random.Generator,
) -> IBPReport:
    """Check the integration-by-parts identity for the Lebesgue-Poisson measure.

    The left side ``int sum_{xi subset eta} G(xi, eta minus xi) dlambda(eta)``
    and the right side ``int int G(xi, eta) dlambda(xi) dlambda(eta)`` are
    estimated from independent samples; the check passes when they agree
    within three combined standard errors.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    weight = math.exp(dom.volume)
    lhs_vals = np.empty(n_samples)
    rhs_vals = np.empty(n_samples)
    for i, eta in enumerate(sample_poisson_batch(dom, 1.0, n_samples, rng)):
        lhs_vals[i] = subset_sum(G, eta)
    xis = sample_poisson_batch(dom, 1.0, n_samples, rng)
    etas = sample_poisson_batch(dom, 1.0, n_samples, rng)
    for i, (xi, eta) in enumerate(zip(xis, etas)):
        rhs_vals[i] = float(G(xi, eta))
    for vals in (lhs_vals, rhs_vals):
        if not np.all(np.isfinite(vals)):
            raise ValueError("G produced non-finite values")
    lhs, lhs_se = _mean_and_se(lhs_vals)
    rhs, rhs_se = _mean_and_se(rhs_vals)
    lhs, lhs_se = weight * lhs, weight * lhs_se
    rhs, rhs_se = weight**2 * rhs, weight**2 * rhs_se
    combined = math.hypot(lhs_se, rhs_se)
    passed = abs(lhs - rhs) <= 3.0 * combined + 1e-12 * max(1.0, abs(lhs), abs(rhs))
    return IBPReport(lhs, rhs, lhs_se, rhs_se, combined, bool(passed), dom.volume)


def _separable_product(dom: Domain, rng: np.random.Generator):
    """Random ``G(xi, eta) = prod_xi u(x) * prod_eta v(y)`` with trigonometric u, v.

    The exact value of both sides is ``exp(int u + int v)``.
    """
    k = rng.integers(1, 4, size=(2, dom.dim))
    base = rng.uniform(0.2, 0.8, size=2)
    amp = base * rng.uniform(0.0, 0.9, size=2)

    def make(j):
        kj = (k[j] * (2.0 * math.pi / dom.side)).tolist()
        b, a = float(base[j]), float(amp[j])

        def f(conf: Configuration) -> float:
            # configurations here hold a handful of points; plain floats beat numpy
            out = 1.0
            for x in conf.points.tolist():
                out *= b + a * math.cos(sum(xi * ki for xi, ki in zip(x, kj)))
            return out

        return f

    u, v = make(0), make(1)
    exact = math.exp(dom.volume * (base[0] + base[1]))
    return (lambda xi, eta: u(xi) * v(eta)), exact


def ibp_battery(dom: Domain, rng: np.random.Generator) -> list[tuple[str, Callable, float | None]]:
    """The five test functions used for the IBP check, with exact values.

    Three closed-form functions plus two random separable products whose
    coefficients are drawn from ``rng``.
    """
    vol = dom.volume
    z1 = z2 = 0.5
    battery: list[tuple[str, Callable, float | None]] = [
        ("empty_indicator", lambda xi, eta: float(len(xi) == 0 and len(eta) == 0), 1.0),
        (
            "power_product",
            lambda xi, eta: z1 ** len(xi) * z2 ** len(eta),
            math.exp(vol * (z1 + z2)),
        ),
        ("count_times_empty", lambda xi, eta: float(len(xi)) * (len(eta) == 0), vol * math.exp(vol)),
    ]
    for j in range(2):
        g, exact = _separable_product(dom, rng)
        battery.append((f"separable_{j}", g, exact))
    return battery


