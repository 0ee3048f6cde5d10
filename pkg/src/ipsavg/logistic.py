"""Spatial logistic birth-death model in a random environment.

A particle at ``x`` dies at rate ``m(x, gamma) + sum_{y in eta, y != x} a_minus(x - y)``
and gives birth at rate ``lambda(x, gamma)``, placing the offspring at
``x + Y`` with ``Y ~ a_plus``. The environment ``gamma`` enters through

    m(x, gamma)      = m0      + sum_{w in gamma} kappa(x - w)
    lambda(x, gamma) = lambda0 + sum_{w in gamma} psi(x - w)

All kernels are radial and are evaluated on minimum-image torus distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .configuration import Configuration, Domain, pairwise_torus_distances

SHAPES = ("gaussian", "tophat", "exponential")
SHAPE_CODES = {name: i for i, name in enumerate(SHAPES)}


def _unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _unit_sphere_area(d: int) -> float:
    # surface area of the unit sphere in R^d
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


@dataclass(frozen=True)
class KernelFunction:
    """Radial kernel ``k(x) = amplitude * f(|x| / range)``.

    ``gaussian``: ``exp(-r^2 / (2 range^2))``; ``tophat``: ``1{r <= range}``;
    ``exponential``: ``exp(-r / range)``.
    """

    shape: str
    amplitude: float
    range: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown kernel shape {self.shape!r}; expected one of {SHAPES}")
        if not (self.amplitude >= 0 and math.isfinite(self.amplitude)):
            raise ValueError(f"kernel amplitude must be >= 0, got {self.amplitude!r}")
        if not (self.range > 0 and math.isfinite(self.range)):
            raise ValueError(f"kernel range must be > 0, got {self.range!r}")

    @classmethod
    def density(cls, shape: str, range_: float, dim: int = 1) -> "KernelFunction":
        """Kernel of the given shape normalized to unit mass in ``R^dim``."""
        unit = cls(shape, 1.0, range_)
        return cls(shape, 1.0 / unit.mass(dim), range_)

    @classmethod
    def zero(cls) -> "KernelFunction":
        return cls("tophat", 0.0, 1.0)

    @property
    def code(self) -> int:
        return SHAPE_CODES[self.shape]

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.shape == "gaussian":
            out = self.amplitude * np.exp(-0.5 * (r / self.range) ** 2)
        elif self.shape == "tophat":
            out = np.where(r <= self.range, self.amplitude, 0.0)
        else:
            out = self.amplitude * np.exp(-r / self.range)
        return out if out.ndim else float(out)

    def mass(self, dim: int = 1) -> float:
        """Closed-form ``int_{R^dim} k(x) dx``."""
        a, s = self.amplitude, self.range
        if a == 0.0:
            return 0.0
        if self.shape == "gaussian":
            return a * (2.0 * math.pi * s * s) ** (dim / 2)
        if self.shape == "tophat":
            return a * _unit_ball_volume(dim) * s**dim
        return a * _unit_sphere_area(dim) * math.factorial(dim - 1) * s**dim

    def second_moment(self, dim: int = 1) -> float:
        """Closed-form ``int_{R^dim} |x|^2 k(x) dx``."""
        m, s = self.mass(dim), self.range
        if self.shape == "gaussian":
            return m * dim * s * s
        if self.shape == "tophat":
            return m * dim * s * s / (dim + 2)
        return m * dim * (dim + 1) * s * s

    def torus_mass(self, dom: Domain) -> float:
        """Mass of the minimum-image periodization, ``int_{[-L/2, L/2]^d} k(|x|) dx``."""
        a, s, half, d = self.amplitude, self.range, dom.side / 2, dom.dim
        if a == 0.0:
            return 0.0
        if self.shape == "gaussian":
            one = s * math.sqrt(2.0 * math.pi) * math.erf(half / (s * math.sqrt(2.0)))
            return a * one**d
        if self.shape == "tophat" and s <= half:
            return self.mass(d)
        if d == 1:
            if self.shape == "tophat":
                return a * dom.side
            return 2.0 * a * s * (1.0 - math.exp(-half / s))
        f = lambda *x: float(self(math.sqrt(sum(t * t for t in x))))
        val, _ = integrate.nquad(f, [(-half, half)] * d, opts={"epsabs": 1e-12, "epsrel": 1e-10})
        return val

    def support_radius(self) -> float:
        """Radius beyond which the kernel is negligible (exactly zero for tophat)."""
        if self.shape == "tophat":
            return self.range
        if self.shape == "gaussian":
            return 10.0 * self.range
        return 40.0 * self.range

    def to_json(self) -> dict:
        return {"shape": self.shape, "amplitude": self.amplitude, "range": self.range}

    @classmethod
    def from_json(cls, data: dict, dim: int = 1) -> "KernelFunction":
        """Build from JSON; ``{"density": true}`` in place of an amplitude normalizes to unit mass."""
        if data.get("density"):
            return cls.density(str(data["shape"]), float(data["range"]), dim)
        return cls(str(data["shape"]), float(data["amplitude"]), float(data["range"]))


def kernel_mass(k: KernelFunction, dim: int = 1) -> float:
    return k.mass(dim)


@dataclass(frozen=True)
class ModelParams:
    m0: float
    lambda0: float
    z: float
    a_plus: KernelFunction
    a_minus: KernelFunction
    kappa: KernelFunction
    psi: KernelFunction
    delta: float = 0.0
    dim: int = 1

    def __post_init__(self):
        for name in ("m0", "lambda0", "z", "delta"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")

    def violations(self, tol: float = 1e-9) -> list[str]:
        out = []
        mass = self.a_plus.mass(self.dim)
        if abs(mass - 1.0) > tol:
            out.append(f"a_plus must be a probability density (mass {mass:.6g} != 1)")
        return out

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_json(self) -> dict:
        return {
            "m0": self.m0,
            "lambda0": self.lambda0,
            "z": self.z,
            "delta": self.delta,
            "a_plus": self.a_plus.to_json(),
            "a_minus": self.a_minus.to_json(),
            "kappa": self.kappa.to_json(),
            "psi": self.psi.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict, dim: int = 1) -> "ModelParams":
        return cls(
            m0=float(data["m0"]),
            lambda0=float(data["lambda0"]),
            z=float(data["z"]),
            delta=float(data.get("delta", 0.0)),
            a_plus=KernelFunction.from_json(data["a_plus"], dim),
            a_minus=KernelFunction.from_json(data["a_minus"], dim),
            kappa=KernelFunction.from_json(data["kappa"], dim),
            psi=KernelFunction.from_json(data["psi"], dim),
            dim=dim,
        )


def _points(conf, dim: int) -> np.ndarray:
    if isinstance(conf, Configuration):
        return conf.points
    return np.asarray(conf, dtype=float).reshape(-1, dim)


def _env_sum(k: KernelFunction, x: np.ndarray, gamma: np.ndarray, dom: Domain) -> np.ndarray:
    """``sum_{w in gamma} k(x_i - w)`` for each row ``x_i``."""
    if len(gamma) == 0 or k.amplitude == 0.0 or len(x) == 0:
        return np.zeros(len(x))
    return np.sum(k(pairwise_torus_distances(dom, x, gamma)), axis=1)


def _locate(x: np.ndarray, eta: np.ndarray) -> int:
    hits = np.flatnonzero(np.all(eta == x, axis=1))
    if len(hits) == 0:
        raise ValueError(f"point {x.tolist()} is not in the configuration")
    return int(hits[0])


def death_rate(x, eta, gamma, p: ModelParams, dom: Domain) -> float:
    """``m(x, gamma) + sum_{y in eta minus x} a_minus(x - y)`` for ``x`` in ``eta``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eta_pts = _points(eta, dom.dim)
    gam = _points(gamma, dom.dim)
    i = _locate(x, eta_pts)
    others = np.delete(eta_pts, i, axis=0)
    comp = 0.0
    if len(others) and p.a_minus.amplitude:
        comp = float(np.sum(p.a_minus(pairwise_torus_distances(dom, x, others))))
    return p.m0 + float(_env_sum(p.kappa, x[None, :], gam, dom)[0]) + comp


def fecundity(x, gamma, p: ModelParams, dom: Domain) -> float:
    """``lambda0 + sum_{w in gamma} psi(x - w)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return p.lambda0 + float(_env_sum(p.psi, x[None, :], _points(gamma, dom.dim), dom)[0])


def rate_vectors(eta, gamma, p: ModelParams, dom: Domain) -> tuple[np.ndarray, np.ndarray]:
    """Per-particle death rates and fecundities of ``eta`` in environment ``gamma``."""
    pts = _points(eta, dom.dim)
    gam = _points(gamma, dom.dim)
    deaths = p.m0 + _env_sum(p.kappa, pts, gam, dom)
    if len(pts) > 1 and p.a_minus.amplitude:
        comp = p.a_minus(pairwise_torus_distances(dom, pts, pts))
        np.fill_diagonal(comp, 0.0)
        deaths = deaths + comp.sum(axis=1)
    births = p.lambda0 + _env_sum(p.psi, pts, gam, dom)
    return deaths, births


def total_rate(eta, gamma, p: ModelParams, dom: Domain) -> float:
    """``q(gamma, eta)``: all death rates plus all fecundities (``a_plus`` has mass 1)."""
    deaths, births = rate_vectors(eta, gamma, p, dom)
    return float(deaths.sum() + births.sum())


def damping(q, delta: float):
    """``exp(-delta * q)``; the damped rate ``q * exp(-delta q)`` is at most ``1 / (e delta)``."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return np.exp(-delta * np.asarray(q, dtype=float)) if np.ndim(q) else math.exp(-delta * q)


def averaged_rates(p: ModelParams, dom: Domain | None = None) -> tuple[float, float]:
    """Poisson(z)-averaged death and fecundity intensities ``(m_bar, lambda_bar)``.

    With ``dom`` given, kernel masses are those of the periodized kernels,
    which is exact for a Poisson environment on the torus.
    """
    if dom is None:
        mk, mp = p.kappa.mass(p.dim), p.psi.mass(p.dim)
    else:
        mk, mp = p.kappa.torus_mass(dom), p.psi.torus_mass(dom)
    return p.m0 + p.z * mk, p.lambda0 + p.z * mp


def beta(p: ModelParams, dom: Domain | None = None) -> float:
    """Averaged net per-capita growth rate ``lambda_bar - m_bar``."""
    m_bar, l_bar = averaged_rates(p, dom)
    return l_bar - m_bar


def critical_intensity(p: ModelParams) -> float:
    """Environment intensity at which ``beta`` vanishes."""
    dk = p.kappa.mass(p.dim) - p.psi.mass(p.dim)
    if dk == 0:
        raise ValueError("beta does not depend on z when <kappa> == <psi>")
    return (p.lambda0 - p.m0) / dk


def averaged_params(p: ModelParams, dom: Domain | None = None) -> ModelParams:
    """Model with the environment replaced by its averaged constant intensities."""
    m_bar, l_bar = averaged_rates(p, dom)
    zero = KernelFunction.zero()
    return replace(p, m0=m_bar, lambda0=l_bar, z=0.0, kappa=zero, psi=zero)


@dataclass
class LyapunovReport:
    holds: bool
    worst_margin: float
    worst_index: int
    worst_x: np.ndarray | None = None
    margins: np.ndarray = field(default_factory=lambda: np.zeros(0))
    violations: list = field(default_factory=list)
    sup_rate_by_level: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "holds": self.holds,
            "worst_margin": self.worst_margin,
            "worst_index": self.worst_index,
            "n_violations": len(self.violations),
        }
        if self.worst_x is not None:
            d["worst_x"] = np.asarray(self.worst_x).tolist()
        return d


def _eval_phi(phi: Callable, pts: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(phi(pts), dtype=float)
        if vals.shape == (len(pts),):
            return vals
    except (TypeError, ValueError, IndexError):
        pass
    return np.array([float(phi(x)) for x in pts])


def convolve_density(k: KernelFunction, phi: Callable, x: np.ndarray, dim: int, nodes: int = 1024) -> np.ndarray:
    """``(k * phi)(x_i)`` in ``R^dim`` by tensor-product trapezoidal quadrature."""
    R = k.support_radius()
    t = np.linspace(-R, R, nodes)
    w1 = np.full(nodes, t[1] - t[0])
    w1[0] *= 0.5
    w1[-1] *= 0.5
    grids = np.meshgrid(*([t] * dim), indexing="ij")
    y = np.stack([g.ravel() for g in grids], axis=1)
    w = np.ones(len(y))
    for g_w in np.meshgrid(*([w1] * dim), indexing="ij"):
        w = w * g_w.ravel()
    kw = w * k(np.sqrt(np.sum(y * y, axis=1)))
    keep = kw != 0.0
    y, kw = y[keep], kw[keep]
    out = np.empty(len(x))
    for i, xi in enumerate(x):
        out[i] = float(kw @ _eval_phi(phi, xi[None, :] - y))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("convolution quadrature produced non-finite values")
    return out


def lyapunov_check_logistic(
    p: ModelParams,
    phi: Callable,
    grid: Sequence,
    c: float,
    nodes: int = 1024,
    tol: float = 1e-9,
) -> LyapunovReport:
    """Check ``lambda_bar (a_plus * phi)(x) <= c phi(x) + phi(x) m_bar`` on ``grid``.

    ``phi`` receives an ``(n, d)`` array of points (or a single point) and must
    be ``>= 1``. Holds iff every margin is ``<= tol`` (relative to the
    magnitude of the compared terms).
    """
    pts = np.asarray(grid, dtype=float).reshape(len(grid), -1) if len(grid) else None
    if pts is None:
        raise ValueError("grid must be nonempty")
    dim = pts.shape[1]
    m_bar, l_bar = averaged_rates(p)
    phi_x = _eval_phi(phi, pts)
    if np.any(phi_x < 1.0):
        raise ValueError("phi must be >= 1 on the grid")
    conv = convolve_density(p.a_plus, phi, pts, dim, nodes)
    lhs = l_bar * conv
    rhs = c * phi_x + phi_x * m_bar
    margins = lhs - rhs
    scale = np.maximum(1.0, np.abs(lhs) + np.abs(rhs))
    i = int(np.argmax(margins))
    bad = np.flatnonzero(margins > tol * scale)
    return LyapunovReport(
        holds=len(bad) == 0,
        worst_margin=float(margins[i]),
        worst_index=i,
        worst_x=pts[i],
        margins=margins,
        violations=[(int(j), float(margins[j])) for j in bad],
    )


def _backward_matrix(Q):
    if hasattr(Q, "backward_matrix"):
        return Q.backward_matrix()
    return Q


def generic_lyapunov_check(
    Q,
    V,
    c: float,
    eps: float = 0.0,
    condition: str = "drift",
    levels=None,
    tol: float = 1e-12,
) -> LyapunovReport:
    """Rowwise drift test ``(QV)(eta)`` against a Lyapunov bound on a finite generator.

    ``condition="drift"`` uses ``c (1 + V) - eps q``; ``condition="linear"``
    uses ``c V``. ``Q`` is a row-form (backward) generator or a
    ``SparseGenerator``. If ``levels`` (e.g. ``|eta|`` per row) is given, the
    supremum of the total rate on each sublevel set is reported as well.
    """
    A = _backward_matrix(Q)
    V = np.asarray(V, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != len(V):
        raise ValueError(f"generator shape {A.shape} incompatible with V of length {len(V)}")
    drift = np.asarray(A @ V).ravel()
    q = -np.asarray(A.diagonal()).ravel()
    if condition == "drift":
        bound = c * (1.0 + V) - eps * q
    elif condition == "linear":
        bound = c * V
    else:
        raise ValueError(f"unknown condition {condition!r}")
    margins = drift - bound
    i = int(np.argmax(margins)) if len(margins) else -1
    bad = np.flatnonzero(margins > tol * np.maximum(1.0, np.abs(bound)))
    sup_levels = {}
    if levels is not None:
        levels = np.asarray(levels)
        for lev in np.unique(levels):
            sup_levels[int(lev)] = float(q[levels <= lev].max())
    return LyapunovReport(
        holds=len(bad) == 0,
        worst_margin=float(margins[i]) if len(margins) else -math.inf,
        worst_index=i,
        margins=margins,
        violations=[(int(j), float(drift[j]), float(bound[j])) for j in bad],
        sup_rate_by_level=sup_levels,
    )
