"""Compare the compiled and pure-Python simulation kernels.

Both kernels consume the same random stream, so each pair of runs is also
checked for identical output.  Usage::

    python3 benchmarks/bench_backends.py [--particles 200] [--epsilon 1e-3] [--repeat 3]
"""

import argparse
import json
import time

import numpy as np

from ipsavg import _backend
from ipsavg.configuration import Configuration, Domain
from ipsavg.environment import EnvSpec
from ipsavg.logistic import KernelFunction, ModelParams
from ipsavg.simulator import SimConfig, simulate_coupled


def build(particles):
    dom = Domain(1, 1.0)
    p = ModelParams(
        1.0, 1.0, 2.0,
        KernelFunction.density("gaussian", 0.1),
        KernelFunction("gaussian", 0.1, 0.1),
        KernelFunction("gaussian", 0.1, 0.1),
        KernelFunction("gaussian", 0.1, 0.1),
    )
    init = Configuration(((np.arange(particles) + 0.5) / particles)[:, None])
    return p, dom, init


def time_one(backend, p, env, init, cfg, dom, seed):
    start = time.perf_counter()
    tr = simulate_coupled(p, env, init, cfg, dom, np.random.default_rng(seed), backend=backend)
    return time.perf_counter() - start, tr


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=200)
    ap.add_argument("--epsilon", type=float, default=1e-3)
    ap.add_argument("--horizon", type=float, default=1.0)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="print a JSON record instead of a table")
    args = ap.parse_args(argv)

    if "compiled" not in _backend.available():
        raise SystemExit("compiled kernel is not built; run `pip install --no-build-isolation -e .` first")

    p, dom, init = build(args.particles)
    env = EnvSpec("free_glauber", 2.0, args.epsilon)
    cfg = SimConfig(args.horizon, max_population=2 * args.particles)
    times = {"compiled": [], "python": []}
    events = None
    for rep in range(args.repeat):
        runs = {b: time_one(b, p, env, init, cfg, dom, rep) for b in times}
        for b, (dt, _) in runs.items():
            times[b].append(dt)
        a, b = runs["compiled"][1], runs["python"][1]
        if a.events != b.events or any(not np.array_equal(x.points, y.points) for x, y in zip(a.configurations, b.configurations)):
            raise SystemExit(f"backends disagree on repeat {rep}")
        events = sum(a.events.values())

    best = {b: min(v) for b, v in times.items()}
    record = {
        "particles": args.particles,
        "epsilon": args.epsilon,
        "horizon": args.horizon,
        "events_per_run": events,
        "best_s": best,
        "speedup": best["python"] / best["compiled"],
        "identical_output": True,
    }
    if args.json:
        print(json.dumps(record, indent=2))
        return
    print(f"{args.particles} particles, epsilon={args.epsilon}, horizon={args.horizon}, {events} events per run")
    for b in ("compiled", "python"):
        print(f"  {b:9s} best of {args.repeat}: {best[b]:.4f} s  ({events / best[b]:,.0f} events/s)")
    print(f"  speedup {record['speedup']:.1f}x, outputs identical")


if __name__ == "__main__":
    main()
