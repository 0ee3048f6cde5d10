"""Experiment configuration: JSON schema, cross-field validation and hashing."""

from __future__ import annotations

import hashlib
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema

from .logistic import KernelFunction

EXPERIMENTS = (
    "ibp-test",
    "lyapunov",
    "averaging-sweep",
    "delta-sweep",
    "mc-compare",
    "moment-bound",
    "resolvent-check",
    "stochasticity-probe",
    "env-ergodic",
)

_number = {"type": "number"}
_numbers = {"type": "array", "items": _number}

_kernel = {
    "type": "object",
    "required": ["shape", "range"],
    "properties": {
        "shape": {"enum": ["gaussian", "tophat", "exponential"]},
        "amplitude": _number,
        "range": {"type": "number", "exclusiveMinimum": 0},
        "density": {"type": "boolean"},
    },
    "anyOf": [{"required": ["amplitude"]}, {"required": ["density"]}],
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "required": ["experiment"],
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "domain": {
            "type": "object",
            "required": ["dim", "side"],
            "properties": {
                "dim": {"type": "integer", "minimum": 1, "maximum": 16},
                "side": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "model": {
            "type": "object",
            "required": ["m0", "lambda0", "z", "a_plus", "a_minus", "kappa", "psi"],
            "properties": {
                "m0": _number,
                "lambda0": _number,
                "z": _number,
                "delta": _number,
                "a_plus": _kernel,
                "a_minus": _kernel,
                "kappa": _kernel,
                "psi": _kernel,
            },
            "additionalProperties": False,
        },
        "env": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["free_glauber", "resample", "frozen", "one_site_glauber"]},
                "z": _number,
                "epsilon": _number,
                "site": _numbers,
            },
            "additionalProperties": False,
        },
        "truncation": {
            "type": "object",
            "required": ["M", "N"],
            "properties": {
                "M": {"type": "integer", "minimum": 1},
                "N": {"type": "integer", "minimum": 0},
                "K": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "epsilon": _numbers,
                "delta": _numbers,
                "z": _numbers,
                "t_grid": _numbers,
                "sizes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
            "additionalProperties": False,
        },
        "simulation": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["lattice-exact", "pure-death", "linear-birth-death", "averaged-vs-coupled"]},
                "replicas": {"type": "integer", "minimum": 1},
                "horizon": _number,
                "record_times": _numbers,
                "max_population": {"type": "integer", "minimum": 1},
                "initial_sites": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "initial_count": {"type": "integer", "minimum": 0},
                "quenched_seed": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "options": {"type": "object"},
        "criteria": {"type": "object", "additionalProperties": _number},
    },
    "additionalProperties": False,
}

REQUIRED_BLOCKS = {
    "ibp-test": ("domain",),
    "lyapunov": ("domain", "model", "truncation"),
    "averaging-sweep": ("domain", "model", "env", "truncation", "sweep"),
    "delta-sweep": ("domain", "model", "env", "truncation", "sweep"),
    "mc-compare": ("domain", "model", "simulation"),
    "moment-bound": ("domain", "model", "truncation", "sweep"),
    "resolvent-check": ("domain", "model", "env", "truncation", "sweep"),
    "stochasticity-probe": ("sweep",),
    "env-ergodic": ("domain", "model", "env"),
}


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


def _path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else ("." if parts else "") + str(p))
    return "".join(parts) or "<root>"


def validate(config: dict) -> list[str]:
    """All violations of the schema and of the cross-field rules; empty when valid."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    out = [f"{_path(e)}: {e.message}" for e in sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))]
    if out or not isinstance(config, dict):
        return out
    exp = config["experiment"]
    for block in REQUIRED_BLOCKS[exp]:
        if block not in config:
            out.append(f"{block}: required for experiment {exp}")

    dim = config.get("domain", {}).get("dim", 1)
    trunc = config.get("truncation")
    if trunc:
        M, N = trunc["M"], trunc["N"]
        if N > M:
            out.append(f"truncation.N: N={N} exceeds M={M}")
        if M > 24:
            out.append(f"truncation.M: M={M} exceeds 24")
        per_axis = round(M ** (1.0 / dim))
        if per_axis**dim != M:
            out.append(f"truncation.M: M={M} is not a perfect power of dim={dim}")

    env = config.get("env")
    if env:
        if "epsilon" in env and not env["epsilon"] > 0:
            out.append("env.epsilon: epsilon must be positive")
        if "z" in env and not env["z"] >= 0:
            out.append("env.z: z must be >= 0")
        if env["kind"] == "one_site_glauber":
            if not env.get("z", 0) > 0:
                out.append("env.z: one-site chain needs z > 0")
            if len(env.get("site", [0.0] * dim)) != dim:
                out.append(f"env.site: expected {dim} coordinates")
    sweep = config.get("sweep", {})
    for i, e in enumerate(sweep.get("epsilon", [])):
        if not e > 0:
            out.append(f"sweep.epsilon[{i}]: epsilon must be positive")
    for i, d in enumerate(sweep.get("delta", [])):
        if not d >= 0:
            out.append(f"sweep.delta[{i}]: delta must be >= 0")
    for i, z in enumerate(sweep.get("z", [])):
        if not z >= 0:
            out.append(f"sweep.z[{i}]: z must be >= 0")
    tg = sweep.get("t_grid", [])
    if any(t < 0 for t in tg) or any(b < a for a, b in zip(tg, tg[1:])):
        out.append("sweep.t_grid: must be sorted and nonnegative")

    model = config.get("model")
    if model:
        for key in ("m0", "lambda0", "z", "delta"):
            v = model.get(key, 0.0)
            if not (v >= 0 and math.isfinite(v)):
                out.append(f"model.{key}: must be finite and >= 0")
        try:
            a_plus = KernelFunction.from_json(model["a_plus"], dim)
            mass = a_plus.mass(dim)
            if abs(mass - 1.0) > 1e-9:
                out.append(f"model.a_plus: a_plus must be a probability density (mass {mass:.6g})")
        except ValueError as exc:
            out.append(f"model.a_plus: {exc}")
        for key in ("a_minus", "kappa", "psi"):
            try:
                KernelFunction.from_json(model[key], dim)
            except ValueError as exc:
                out.append(f"model.{key}: {exc}")

    sim = config.get("simulation")
    if sim:
        horizon = sim.get("horizon", 1.0)
        if not horizon >= 0:
            out.append("simulation.horizon: must be >= 0")
        rt = sim.get("record_times", [])
        if any(t < 0 or t > horizon for t in rt) or any(b < a for a, b in zip(rt, rt[1:])):
            out.append("simulation.record_times: must be sorted within [0, horizon]")
        if sim.get("mode", "lattice-exact") == "lattice-exact" and trunc is None:
            out.append("truncation: required for lattice-exact simulation")
        if trunc and sim.get("initial_sites") and max(sim["initial_sites"]) >= trunc["M"]:
            out.append("simulation.initial_sites: site index out of range")
    return out


def warnings(config: dict) -> list[str]:
    """Non-fatal remarks, e.g. kernels wider than half the torus."""
    out = []
    model, domain = config.get("model"), config.get("domain")
    if model and domain:
        for key in ("a_plus", "a_minus", "kappa", "psi"):
            k = model.get(key, {})
            if k.get("amplitude", 1.0) != 0 and k.get("range", 0) > domain["side"] / 2:
                out.append(f"model.{key}: range exceeds half the torus side; periodization is visible")
    return out


def canonical(config: dict) -> str:
    body = {k: v for k, v in config.items() if k != "output"}
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical(config).encode()).hexdigest()


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("ipsavg.configs").iterdir() if p.name.endswith(".json"))


def load(source: str) -> dict:
    """Load a config from a path, or by name from the shipped configs."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        name = source[:-5] if source.endswith(".json") else source
        ref = resources.files("ipsavg.configs") / f"{name}.json"
        if not ref.is_file():
            raise FileNotFoundError(f"no config file or shipped config named {source!r}")
        text = ref.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<root>: invalid JSON ({exc})"]) from exc
