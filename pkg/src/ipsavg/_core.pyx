# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loop for the coupled system/environment jump process.

Mirrors ``_pycore.py`` operation for operation; see that module for the
reference semantics.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, floor, cos, pow, fabs, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef double INV_2_53 = 1.0 / 9007199254740992.0
cdef double TWO_PI = 6.283185307179586
cdef double POISSON_CHUNK = 20.0

cdef enum:
    BIRTH = 0
    DEATH = 1
    SUPPRESSED = 2
    ENV = 3
    REJECTED = 4


cdef struct Rng:
    uint64_t s0
    uint64_t s1
    uint64_t s2
    uint64_t s3


cdef inline uint64_t rotl(uint64_t x, int k) noexcept nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t rng_next(Rng* r) noexcept nogil:
    cdef uint64_t result = rotl(r.s1 * 5, 7) * 9
    cdef uint64_t t = r.s1 << 17
    r.s2 ^= r.s0
    r.s3 ^= r.s1
    r.s1 ^= r.s2
    r.s0 ^= r.s3
    r.s2 ^= t
    r.s3 = rotl(r.s3, 45)
    return result


cdef inline double rng_uniform(Rng* r) noexcept nogil:
    return <double>(rng_next(r) >> 11) * INV_2_53


cdef inline double rng_normal(Rng* r) noexcept nogil:
    cdef double u1 = rng_uniform(r)
    cdef double u2 = rng_uniform(r)
    return sqrt(-2.0 * log(1.0 - u1)) * cos(TWO_PI * u2)


cdef inline long rng_poisson(Rng* r, double mean) noexcept nogil:
    cdef long k = 0
    cdef double m, lim, p
    while mean > 0.0:
        m = mean if mean < POISSON_CHUNK else POISSON_CHUNK
        mean -= m
        lim = exp(-m)
        p = rng_uniform(r)
        while p > lim:
            k += 1
            p *= rng_uniform(r)
    return k


cdef inline double kernel_value(int code, double amp, double rg, double r) noexcept nogil:
    cdef double t
    if amp == 0.0:
        return 0.0
    if code == 0:
        t = r / rg
        return amp * exp(-0.5 * (t * t))
    if code == 1:
        return amp if r <= rg else 0.0
    return amp * exp(-r / rg)


cdef inline double torus_dist(double[:, ::1] A, Py_ssize_t i, double[:, ::1] Bm, Py_ssize_t j,
                              int dim, double side) noexcept nogil:
    cdef double s = 0.0, diff
    cdef int k
    for k in range(dim):
        diff = A[i, k] - Bm[j, k]
        diff = diff - side * floor(diff / side + 0.5)
        s += diff * diff
    return sqrt(s)


cdef inline double wrap(double v, double side) noexcept nogil:
    v = v - side * floor(v / side)
    if v >= side:
        v -= side
    return v


cdef void displacement(Rng* rng, int code, double rg, int dim, double* out) noexcept nogil:
    cdef int k
    cdef double r, norm
    if code == 0:
        for k in range(dim):
            out[k] = rg * rng_normal(rng)
        return
    if dim == 1:
        if code == 1:
            out[0] = (2.0 * rng_uniform(rng) - 1.0) * rg
        else:
            r = -rg * log(1.0 - rng_uniform(rng))
            out[0] = r if rng_uniform(rng) < 0.5 else -r
        return
    norm = 0.0
    for k in range(dim):
        out[k] = rng_normal(rng)
        norm += out[k] * out[k]
    norm = sqrt(norm)
    if code == 1:
        r = rg * pow(rng_uniform(rng), 1.0 / dim)
    else:
        r = 0.0
        for k in range(dim):
            r -= log(1.0 - rng_uniform(rng))
        r *= rg
    for k in range(dim):
        out[k] = out[k] / norm * r


cdef class _Buffers:
    """Growable particle and environment storage."""
    cdef public object pos, em, el, comp, site, gam
    cdef public Py_ssize_t cap, gcap

    def __init__(self, int dim, Py_ssize_t cap, Py_ssize_t gcap):
        self.cap = cap
        self.gcap = gcap
        self.pos = np.zeros((cap, dim))
        self.em = np.zeros(cap)
        self.el = np.zeros(cap)
        self.comp = np.zeros(cap)
        self.site = np.zeros(cap, dtype=np.int64)
        self.gam = np.zeros((gcap, dim))

    def grow_particles(self, Py_ssize_t n):
        new = max(2 * self.cap, 16)
        for name in ("pos", "em", "el", "comp", "site"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[:n] = old[:n]
            setattr(self, name, arr)
        self.cap = new

    def grow_env(self, Py_ssize_t g):
        new = max(2 * self.gcap, 16)
        arr = np.zeros((new, self.gam.shape[1]))
        arr[:g] = self.gam[:g]
        self.gam = arr
        self.gcap = new


def run_kernel(
    int dim, double side, kcode, kamp, krange, double m0, double lambda0, double delta,
    int env_kind, double z, double epsilon,
    init_pos, init_sites, gamma0,
    sites, wcum, wsum,
    long n_cap, record_times, double horizon, rng_state, long audit_every,
):
    cdef Rng rng
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] st = np.ascontiguousarray(rng_state, dtype=np.uint64)
    rng.s0 = st[0]
    rng.s1 = st[1]
    rng.s2 = st[2]
    rng.s3 = st[3]

    cdef int kc[4]
    cdef double ka[4]
    cdef double kr[4]
    cdef int q
    for q in range(4):
        kc[q] = int(kcode[q])
        ka[q] = float(kamp[q])
        kr[q] = float(krange[q])

    cdef double[:, ::1] sites_v = np.array(np.asarray(sites, dtype=float).reshape(-1, dim))
    cdef Py_ssize_t M = sites_v.shape[0]
    cdef bint lattice = M > 0
    cdef double[:, ::1] wcum_v = np.array(np.asarray(wcum, dtype=float).reshape(M, M), order="C") if lattice else np.zeros((1, 1))
    cdef double[::1] wsum_v = np.array(wsum, dtype=float) if lattice else np.zeros(1)
    cdef cnp.ndarray occ_arr = np.zeros(max(M, 1), dtype=np.uint8)
    cdef unsigned char[::1] occupied = occ_arr

    cdef double vol = side ** dim
    cdef double imm = z * vol

    init = np.asarray(init_pos, dtype=float).reshape(-1, dim)
    g0 = np.asarray(gamma0, dtype=float).reshape(-1, dim)
    cdef Py_ssize_t n = init.shape[0]
    cdef Py_ssize_t G = g0.shape[0]
    buf = _Buffers(dim, max(16, 2 * n), max(16, 2 * G))
    buf.pos[:n] = init
    buf.gam[:G] = g0
    cdef double[:, ::1] pos = buf.pos
    cdef double[::1] em = buf.em
    cdef double[::1] el = buf.el
    cdef double[::1] comp = buf.comp
    cdef int64_t[::1] site = buf.site
    cdef double[:, ::1] gam = buf.gam
    cdef Py_ssize_t i, j, jg, y, last, s_par, k
    if lattice:
        for i in range(n):
            site[i] = int(init_sites[i])
            occupied[site[i]] = 1

    cdef double[::1] rtimes = np.array(record_times, dtype=float)
    cdef Py_ssize_t n_rec = rtimes.shape[0]
    counts = np.full(n_rec, -1, dtype=np.int64)
    env_counts = np.full(n_rec, -1, dtype=np.int64)
    rec_pos = [None] * n_rec
    rec_sites = [None] * n_rec
    events_arr = np.zeros(5, dtype=np.int64)
    cdef int64_t[::1] events = events_arr
    cdef bint exploded = False
    cdef double audit_max = 0.0
    cdef long since_audit = 0
    cdef double t = 0.0, t_next, R_env, R_sys, R, u, u2, u3, acc, a, b, c, r, kv, p, f
    cdef double D = 0.0, B = 0.0, F = 0.0, D_c, B_c, F_c, rel, target, a_env, b_env
    cdef Py_ssize_t rec = 0
    cdef long g_n
    cdef double disp[16]
    cdef double[:, ::1] newp = np.zeros((1, dim))
    cdef bint accept
    cdef Py_ssize_t new_site
    if dim > 16:
        raise ValueError("compiled kernel supports dim <= 16")

    # fresh rates
    D, B, F = _fresh(pos, em, el, comp, site, gam, wsum_v, lattice, n, G, dim, side,
                     kc, ka, kr, m0, lambda0, True)

    while True:
        R_env = 0.0
        if env_kind == 0:
            R_env = (imm + G) / epsilon
        elif env_kind == 1:
            R_env = 1.0 / epsilon
        R_sys = D + B if n > 0 else 0.0
        R = R_sys + R_env
        if R > 0.0:
            t_next = t - log(1.0 - rng_uniform(&rng)) / R
        else:
            t_next = INFINITY
        while rec < n_rec and rtimes[rec] < t_next:
            counts[rec] = n
            env_counts[rec] = G
            rec_pos[rec] = np.array(buf.pos[:n], dtype=float)
            if lattice:
                rec_sites[rec] = np.array(buf.site[:n], dtype=np.int64)
            rec += 1
        if t_next > horizon:
            break
        t = t_next
        u = rng_uniform(&rng) * R
        if u < R_env:
            events[ENV] += 1
            if env_kind == 1:
                g_n = rng_poisson(&rng, imm)
                while g_n > buf.gcap:
                    buf.grow_env(0)
                    gam = buf.gam
                G = 0
                for jg in range(g_n):
                    for k in range(dim):
                        gam[G, k] = rng_uniform(&rng) * side
                    G += 1
                D, B, F = _fresh(pos, em, el, comp, site, gam, wsum_v, lattice, n, G, dim, side,
                                 kc, ka, kr, m0, lambda0, False)
            elif rng_uniform(&rng) * (imm + G) < imm:
                if G >= buf.gcap:
                    buf.grow_env(G)
                    gam = buf.gam
                for k in range(dim):
                    gam[G, k] = rng_uniform(&rng) * side
                for i in range(n):
                    r = torus_dist(pos, i, gam, G, dim, side)
                    kv = kernel_value(kc[2], ka[2], kr[2], r)
                    em[i] += kv
                    D += kv
                    p = kernel_value(kc[3], ka[3], kr[3], r)
                    el[i] += p
                    F += p
                    B += p * (wsum_v[site[i]] if lattice else 1.0)
                G += 1
            else:
                jg = <Py_ssize_t>(rng_uniform(&rng) * G)
                if jg >= G:
                    jg = G - 1
                for i in range(n):
                    r = torus_dist(pos, i, gam, jg, dim, side)
                    kv = kernel_value(kc[2], ka[2], kr[2], r)
                    em[i] -= kv
                    D -= kv
                    p = kernel_value(kc[3], ka[3], kr[3], r)
                    el[i] -= p
                    F -= p
                    B -= p * (wsum_v[site[i]] if lattice else 1.0)
                for k in range(dim):
                    gam[jg, k] = gam[G - 1, k]
                G -= 1
        else:
            accept = True
            if delta > 0.0:
                if rng_uniform(&rng) >= exp(-delta * (D + F)):
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
                            a = kernel_value(kc[1], ka[1], kr[1], torus_dist(pos, i, pos, j, dim, side))
                            comp[j] -= a
                            D -= a
                    D -= m0 + em[i] + comp[i]
                    f = lambda0 + el[i]
                    F -= f
                    B -= f * (wsum_v[site[i]] if lattice else 1.0)
                    if lattice:
                        occupied[site[i]] = 0
                    last = n - 1
                    for k in range(dim):
                        pos[i, k] = pos[last, k]
                    em[i] = em[last]
                    el[i] = el[last]
                    comp[i] = comp[last]
                    site[i] = site[last]
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
                        acc += (lambda0 + el[i]) * (wsum_v[site[i]] if lattice else 1.0)
                        if u3 < acc:
                            break
                        i += 1
                    new_site = -1
                    if lattice:
                        s_par = site[i]
                        target = rng_uniform(&rng) * wsum_v[s_par]
                        y = 0
                        while y < M - 1 and wcum_v[s_par, y] <= target:
                            y += 1
                        if occupied[y] or n >= n_cap:
                            events[SUPPRESSED] += 1
                            new_site = -2
                        else:
                            new_site = y
                            for k in range(dim):
                                newp[0, k] = sites_v[y, k]
                    else:
                        if n >= n_cap:
                            exploded = True
                            events[BIRTH] += 1
                            break
                        displacement(&rng, kc[0], kr[0], dim, disp)
                        for k in range(dim):
                            newp[0, k] = wrap(pos[i, k] + disp[k], side)
                    if new_site != -2:
                        events[BIRTH] += 1
                        a_env = 0.0
                        b_env = 0.0
                        for jg in range(G):
                            r = torus_dist(newp, 0, gam, jg, dim, side)
                            a_env += kernel_value(kc[2], ka[2], kr[2], r)
                            b_env += kernel_value(kc[3], ka[3], kr[3], r)
                        c = 0.0
                        for j in range(n):
                            a = kernel_value(kc[1], ka[1], kr[1], torus_dist(newp, 0, pos, j, dim, side))
                            comp[j] += a
                            D += a
                            c += a
                        if n >= buf.cap:
                            buf.grow_particles(n)
                            pos = buf.pos
                            em = buf.em
                            el = buf.el
                            comp = buf.comp
                            site = buf.site
                        for k in range(dim):
                            pos[n, k] = newp[0, k]
                        em[n] = a_env
                        el[n] = b_env
                        comp[n] = c
                        if lattice:
                            site[n] = new_site
                            occupied[new_site] = 1
                        n += 1
                        D += m0 + a_env + c
                        f = lambda0 + b_env
                        F += f
                        B += f * (wsum_v[site[n - 1]] if lattice else 1.0)
        since_audit += 1
        if since_audit >= audit_every:
            since_audit = 0
            D_c = D
            B_c = B
            F_c = F
            D, B, F = _fresh(pos, em, el, comp, site, gam, wsum_v, lattice, n, G, dim, side,
                             kc, ka, kr, m0, lambda0, True)
            rel = fabs(D_c - D) / max(fabs(D), 1.0)
            if rel > audit_max:
                audit_max = rel
            rel = fabs(B_c - B) / max(fabs(B), 1.0)
            if rel > audit_max:
                audit_max = rel
            rel = fabs(F_c - F) / max(fabs(F), 1.0)
            if rel > audit_max:
                audit_max = rel

    rng_out = np.array([rng.s0, rng.s1, rng.s2, rng.s3], dtype=np.uint64)
    return {
        "counts": counts,
        "env_counts": env_counts,
        "positions": rec_pos,
        "sites": rec_sites,
        "events": events_arr,
        "exploded": bool(exploded),
        "audit_max": audit_max,
        "t_final": t,
        "rng_state": rng_out,
        "final_positions": np.array(buf.pos[:n], dtype=float),
        "final_gamma": np.array(buf.gam[:G], dtype=float),
    }


cdef tuple _fresh(double[:, ::1] pos, double[::1] em, double[::1] el, double[::1] comp,
                  int64_t[::1] site, double[:, ::1] gam, double[::1] wsum, bint lattice,
                  Py_ssize_t n, Py_ssize_t G, int dim, double side,
                  int* kc, double* ka, double* kr, double m0, double lambda0, bint with_comp):
    cdef Py_ssize_t i, j, g
    cdef double a, b, c, r, f
    cdef double D = 0.0, B = 0.0, F = 0.0
    for i in range(n):
        a = 0.0
        b = 0.0
        for g in range(G):
            r = torus_dist(pos, i, gam, g, dim, side)
            a += kernel_value(kc[2], ka[2], kr[2], r)
            b += kernel_value(kc[3], ka[3], kr[3], r)
        em[i] = a
        el[i] = b
        if with_comp:
            c = 0.0
            for j in range(n):
                if j != i:
                    c += kernel_value(kc[1], ka[1], kr[1], torus_dist(pos, i, pos, j, dim, side))
            comp[i] = c
    for i in range(n):
        D += m0 + em[i] + comp[i]
        f = lambda0 + el[i]
        F += f
        B += f * (wsum[site[i]] if lattice else 1.0)
    return D, B, F
