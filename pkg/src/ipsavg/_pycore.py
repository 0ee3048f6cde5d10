"""Pure-Python event loop for the coupled system/environment jump process.

Line-for-line mirror of ``_core.pyx``. Both draw from the same xoshiro256**
stream and perform floating-point operations in the same order, so a run
with a given seed state produces the same trajectory on either backend.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
INV_2_53 = 1.0 / 9007199254740992.0
TWO_PI = 6.283185307179586
POISSON_CHUNK = 20.0

# event counter slots
BIRTH, DEATH, SUPPRESSED, ENV, REJECTED = range(5)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator over Python ints."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, state):
        self.s0, self.s1, self.s2, self.s3 = (int(v) & MASK64 for v in state)

    def next(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        return (self.next() >> 11) * INV_2_53

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(TWO_PI * u2)

    def poisson(self, mean: float) -> int:
        k = 0
        while mean > 0.0:
            m = mean if mean < POISSON_CHUNK else POISSON_CHUNK
            mean -= m
            lim = math.exp(-m)
            p = self.uniform()
            while p > lim:
                k += 1
                p *= self.uniform()
        return k

    def state(self) -> np.ndarray:
        return np.array([self.s0, self.s1, self.s2, self.s3], dtype=np.uint64)


def kernel_value(code: int, amp: float, rng_: float, r: float) -> float:
    if amp == 0.0:
        return 0.0
    if code == 0:
        t = r / rng_
        return amp * math.exp(-0.5 * (t * t))
    if code == 1:
        return amp if r <= rng_ else 0.0
    return amp * math.exp(-r / rng_)


def torus_dist(a, b, dim: int, side: float) -> float:
    s = 0.0
    for k in range(dim):
        diff = a[k] - b[k]
        diff = diff - side * math.floor(diff / side + 0.5)
        s += diff * diff
    return math.sqrt(s)


def _wrap(v: float, side: float) -> float:
    v = v - side * math.floor(v / side)
    if v >= side:
        v -= side
    return v


def displacement(rng: Xoshiro256, code: int, rng_: float, dim: int, out: list) -> None:
    """Offspring displacement drawn from the normalized dispersal kernel."""
    if code == 0:
        for k in range(dim):
            out[k] = rng_ * rng.normal()
        return
    if dim == 1:
        if code == 1:
            out[0] = (2.0 * rng.uniform() - 1.0) * rng_
        else:
            r = -rng_ * math.log(1.0 - rng.uniform())
            out[0] = r if rng.uniform() < 0.5 else -r
        return
    norm = 0.0
    for k in range(dim):
        out[k] = rng.normal()
        norm += out[k] * out[k]
    norm = math.sqrt(norm)
    if code == 1:
        r = rng_ * math.pow(rng.uniform(), 1.0 / dim)
    else:
        r = 0.0
        for k in range(dim):
            r -= math.log(1.0 - rng.uniform())
        r *= rng_
    for k in range(dim):
        out[k] = out[k] / norm * r


def run_kernel(
    dim, side, kcode, kamp, krange, m0, lambda0, delta,
    env_kind, z, epsilon,
    init_pos, init_sites, gamma0,
    sites, wcum, wsum,
    n_cap, record_times, horizon, rng_state, audit_every,
):
    """Simulate one trajectory; see ``ipsavg.simulator`` for the public API.

    Kernel slots: 0 dispersal, 1 competition, 2 environment mortality,
    3 environment fecundity. ``sites`` empty means continuum mode.
    """
    rng = Xoshiro256(rng_state)
    lattice = len(sites) > 0
    vol = side**dim
    imm = z * vol

    pos = [list(map(float, p)) for p in np.asarray(init_pos, dtype=float).reshape(-1, dim)]
    site = [int(s) for s in init_sites]
    gam = [list(map(float, g)) for g in np.asarray(gamma0, dtype=float).reshape(-1, dim)]
    occupied = [False] * len(sites)
    for s in site:
        if lattice:
            occupied[s] = True
    n = len(pos)
    em = [0.0] * n
    el = [0.0] * n
    comp = [0.0] * n

    def bmass(i):
        return wsum[site[i]] if lattice else 1.0

    def fresh():
        for i in range(n):
            a = 0.0
            b = 0.0
            for g in gam:
                r = torus_dist(pos[i], g, dim, side)
                a += kernel_value(kcode[2], kamp[2], krange[2], r)
                b += kernel_value(kcode[3], kamp[3], krange[3], r)
            em[i] = a
            el[i] = b
            c = 0.0
            for j in range(n):
                if j != i:
                    c += kernel_value(kcode[1], kamp[1], krange[1], torus_dist(pos[i], pos[j], dim, side))
            comp[i] = c
        D = 0.0
        B = 0.0
        F = 0.0
        for i in range(n):
            D += m0 + em[i] + comp[i]
            f = lambda0 + el[i]
            F += f
            B += f * bmass(i)
        return D, B, F

    def env_only_fresh():
        for i in range(n):
            a = 0.0
            b = 0.0
            for g in gam:
                r = torus_dist(pos[i], g, dim, side)
                a += kernel_value(kcode[2], kamp[2], krange[2], r)
                b += kernel_value(kcode[3], kamp[3], krange[3], r)
            em[i] = a
            el[i] = b
        D = 0.0
        B = 0.0
        F = 0.0
        for i in range(n):
            D += m0 + em[i] + comp[i]
            f = lambda0 + el[i]
            F += f
            B += f * bmass(i)
        return D, B, F

    D, B, F = fresh()
    n_rec = len(record_times)
    counts = np.full(n_rec, -1, dtype=np.int64)
    env_counts = np.full(n_rec, -1, dtype=np.int64)
    rec_pos = [None] * n_rec
    rec_sites = [None] * n_rec
    events = np.zeros(5, dtype=np.int64)
    exploded = False
    audit_max = 0.0
    since_audit = 0
    t = 0.0
    rec = 0
    disp = [0.0] * dim

    while True:
        R_env = 0.0
        if env_kind == 0:
            R_env = (imm + len(gam)) / epsilon
        elif env_kind == 1:
            R_env = 1.0 / epsilon
        R_sys = D + B if n > 0 else 0.0
        R = R_sys + R_env
        if R > 0.0:
            t_next = t - math.log(1.0 - rng.uniform()) / R
        else:
            t_next = math.inf
        while rec < n_rec and record_times[rec] < t_next:
            counts[rec] = n
            env_counts[rec] = len(gam)
            rec_pos[rec] = np.array(pos, dtype=float).reshape(n, dim)
            if lattice:
                rec_sites[rec] = np.array(site, dtype=np.int64)
            rec += 1
        if t_next > horizon:
            break
        t = t_next
        u = rng.uniform() * R
        if u < R_env:
            events[ENV] += 1
            if env_kind == 1:
                g_n = rng.poisson(imm)
                gam = []
                for _ in range(g_n):
                    gam.append([rng.uniform() * side for _ in range(dim)])
                D, B, F = env_only_fresh()
            elif rng.uniform() * (imm + len(gam)) < imm:
                w = [rng.uniform() * side for _ in range(dim)]
                gam.append(w)
                for i in range(n):
                    r = torus_dist(pos[i], w, dim, side)
                    k = kernel_value(kcode[2], kamp[2], krange[2], r)
                    em[i] += k
                    D += k
                    p = kernel_value(kcode[3], kamp[3], krange[3], r)
                    el[i] += p
                    F += p
                    B += p * bmass(i)
            else:
                jg = int(rng.uniform() * len(gam))
                if jg >= len(gam):
                    jg = len(gam) - 1
                w = gam[jg]
                for i in range(n):
                    r = torus_dist(pos[i], w, dim, side)
                    k = kernel_value(kcode[2], kamp[2], krange[2], r)
                    em[i] -= k
                    D -= k
                    p = kernel_value(kcode[3], kamp[3], krange[3], r)
                    el[i] -= p
                    F -= p
                    B -= p * bmass(i)
                gam[jg] = gam[-1]
                gam.pop()
        else:
            accept = True
            if delta > 0.0:
                if rng.uniform() >= math.exp(-delta * (D + F)):
                    accept = False
            if not accept:
                events[REJECTED] += 1
            else:
                u2 = u - R_env
                if u2 < D:
                    i = 0
                    acc = 0.0
                    while i < n - 1:
                        acc += m0 + em[i] + comp[i]
                        if u2 < acc:
                            break
                        i += 1
                    events[DEATH] += 1
                    for j in range(n):
                        if j != i:
                            a = kernel_value(kcode[1], kamp[1], krange[1], torus_dist(pos[i], pos[j], dim, side))
                            comp[j] -= a
                            D -= a
                    D -= m0 + em[i] + comp[i]
                    f = lambda0 + el[i]
                    F -= f
                    B -= f * bmass(i)
                    if lattice:
                        occupied[site[i]] = False
                    last = n - 1
                    pos[i] = pos[last]
                    em[i] = em[last]
                    el[i] = el[last]
                    comp[i] = comp[last]
                    if lattice:
                        site[i] = site[last]
                        site.pop()
                    pos.pop()
                    em.pop()
                    el.pop()
                    comp.pop()
                    n -= 1
                    if n == 0:
                        D = 0.0
                        B = 0.0
                        F = 0.0
                else:
                    u3 = u2 - D
                    i = 0
                    acc = 0.0
                    while i < n - 1:
                        acc += (lambda0 + el[i]) * bmass(i)
                        if u3 < acc:
                            break
                        i += 1
                    new_site = -1
                    if lattice:
                        s_par = site[i]
                        target = rng.uniform() * wsum[s_par]
                        y = 0
                        while y < len(sites) - 1 and wcum[s_par][y] <= target:
                            y += 1
                        if occupied[y] or n >= n_cap:
                            events[SUPPRESSED] += 1
                            new_site = -2
                        else:
                            new_site = y
                            newp = [float(v) for v in sites[y]]
                    else:
                        if n >= n_cap:
                            exploded = True
                            events[BIRTH] += 1
                            break
                        displacement(rng, kcode[0], krange[0], dim, disp)
                        newp = [_wrap(pos[i][k] + disp[k], side) for k in range(dim)]
                    if new_site != -2:
                        events[BIRTH] += 1
                        a_env = 0.0
                        b_env = 0.0
                        for g in gam:
                            r = torus_dist(newp, g, dim, side)
                            a_env += kernel_value(kcode[2], kamp[2], krange[2], r)
                            b_env += kernel_value(kcode[3], kamp[3], krange[3], r)
                        c = 0.0
                        for j in range(n):
                            a = kernel_value(kcode[1], kamp[1], krange[1], torus_dist(newp, pos[j], dim, side))
                            comp[j] += a
                            D += a
                            c += a
                        pos.append(newp)
                        em.append(a_env)
                        el.append(b_env)
                        comp.append(c)
                        if lattice:
                            site.append(new_site)
                            occupied[new_site] = True
                        n += 1
                        D += m0 + a_env + c
                        f = lambda0 + b_env
                        F += f
                        B += f * bmass(n - 1)
        since_audit += 1
        if since_audit >= audit_every:
            since_audit = 0
            D_c, B_c, F_c = D, B, F
            D, B, F = fresh()
            for cached, fr in ((D_c, D), (B_c, B), (F_c, F)):
                rel = abs(cached - fr) / max(abs(fr), 1.0)
                if rel > audit_max:
                    audit_max = rel

    return {
        "counts": counts,
        "env_counts": env_counts,
        "positions": rec_pos,
        "sites": rec_sites,
        "events": events,
        "exploded": exploded,
        "audit_max": audit_max,
        "t_final": t,
        "rng_state": rng.state(),
        "final_positions": np.array(pos, dtype=float).reshape(n, dim),
        "final_gamma": np.array(gam, dtype=float).reshape(len(gam), dim),
    }
