"""Event loop of the particle system (numba).

The state lives in flat arrays: ``pos[i, k]`` is the location of the k-th
particle of type i (first coordinate only for one-dimensional domains),
``clan[i, k]`` its clan label and ``tlast[i, k]`` the last time its
position was brought up to date.  Particles of a type occupy slots
``0..count[i]-1``; deaths swap the last slot into the hole.
"""

import math
from collections import namedtuple

import numpy as np
from numba import njit

from .geometry import (
    FINITE,
    SPHERE,
    diffuse,
    local_step,
    pick_cumulative,
    uniform_location,
    vmf_sphere,
    von_mises_angle,
)
from .rng import exponential, uniform

Params = namedtuple(
    "Params",
    [
        "N", "q", "K", "dom", "L", "H_max", "track_clans",
        "poly_exp", "poly_coef", "poly_start", "max_deg",
        "beta_id", "rho_id", "kappa_id",
        "bs_bound", "ds_bound", "pos_start", "pos_code", "pos_order", "pos_poly",
        "disp_kind", "disp_c", "disp_s", "disp_kernel", "disp_cum", "disp_newclan",
        "imm_law", "imm_cum", "imm_mean", "imm_conc",
        "mig_out", "mig_max", "mig_cum", "diff", "rate_table",
    ],
)

# event kinds used in traces and counters
LOCAL_BIRTH, DISPERSED_BIRTH, DEATH, IMMIGRATION, MIGRATION, REJECTED = range(6)
N_COUNTERS = 7  # the last slot counts loop iterations

# return codes of advance()
REACHED, EXTINCT, EXPLODED = 0, 1, 2


@njit(cache=True, inline="always")
def eval_poly(poly_exp, poly_coef, poly_start, pid, hpow):
    total = 0.0
    q = poly_exp.shape[1]
    for t in range(poly_start[pid], poly_start[pid + 1]):
        m = poly_coef[t]
        for k in range(q):
            e = poly_exp[t, k]
            if e:
                m *= hpow[k, e]
        total += m
    return total


@njit(cache=True, inline="always")
def fill_powers(count, N, hpow):
    for k in range(hpow.shape[0]):
        h = count[k] / N
        hpow[k, 0] = 1.0
        for e in range(1, hpow.shape[1]):
            hpow[k, e] = hpow[k, e - 1] * h


@njit(cache=True)
def eval_basis(dom, L, code, order, x):
    if code == 0:
        return 1.0
    if code == 1:
        return 1.0 if int(x[0]) == order else 0.0
    if code == 2 or code == 3:
        if dom == 1:
            arg = 2.0 * math.pi * order * x[0] / L
        else:
            arg = math.pi * order * x[0]
        return math.cos(arg) if code == 2 else math.sin(arg)
    if code == 4:
        return x[0]
    if code == 5:
        return x[1]
    if code == 6:
        return x[2]
    # zonal Legendre polynomial P_order(z)
    z = x[2]
    p0, p1 = 1.0, z
    if order == 0:
        return 1.0
    for l in range(1, order):
        p0, p1 = p1, ((2 * l + 1) * z * p1 - l * p0) / (l + 1)
    return p1


@njit(cache=True)
def position_rate(P, slot, x, hpow):
    total = 0.0
    for t in range(P.pos_start[slot], P.pos_start[slot + 1]):
        total += (eval_basis(P.dom, P.L, P.pos_code[t], P.pos_order[t], x)
                  * eval_poly(P.poly_exp, P.poly_coef, P.poly_start, P.pos_poly[t], hpow))
    return total


@njit(cache=True)
def touch(dom, L, diff, pos, tlast, i, k, t, rng):
    """Bring the position of particle (i, k) up to time t."""
    if dom != FINITE:
        dt = t - tlast[i, k]
        if dt > 0.0:
            diffuse(dom, L, pos[i, k], diff[i] * dt, rng)
    tlast[i, k] = t


@njit(cache=True)
def sync_all(P, pos, tlast, count, t, rng):
    for i in range(P.q):
        for k in range(count[i]):
            touch(P.dom, P.L, P.diff, pos, tlast, i, k, t, rng)


@njit(cache=True)
def _record(trace_t, trace_v, ntrace, t, kind, i, j, a, b):
    n = ntrace[0]
    if n < trace_t.shape[0]:
        trace_t[n] = t
        trace_v[n, 0] = kind
        trace_v[n, 1] = i
        trace_v[n, 2] = j
        trace_v[n, 3] = a
        trace_v[n, 4] = b
    ntrace[0] = n + 1


@njit(cache=True)
def _immigrant_location(P, i, x, rng):
    law = P.imm_law[i]
    if law == 1:
        x[0] = float(pick_cumulative(P.imm_cum[i], rng))
    elif law == 2:
        if P.dom == SPHERE:
            vmf_sphere(P.imm_mean[i], P.imm_conc[i], x, rng)
        else:
            ang = von_mises_angle(P.imm_conc[i], rng)
            x[0] = (P.imm_mean[i, 0] + ang * P.L / (2.0 * math.pi)) % P.L
    else:
        uniform_location(P.dom, P.L, P.K, x, rng)


@njit(cache=True)
def advance(P, pos, clan, tlast, count, sites, counters, rng, t, t_end,
            trace_t, trace_v, ntrace):
    """Run events until t_end.  Returns (status, time reached)."""
    q = P.q
    N = P.N
    dom = P.dom
    L = P.L
    K = P.K
    finite = dom == FINITE
    cap_total = P.H_max * N
    poly_exp = P.poly_exp
    poly_coef = P.poly_coef
    poly_start = P.poly_start
    beta_id = P.beta_id
    rho_id = P.rho_id
    kappa_id = P.kappa_id
    bs_bound = P.bs_bound
    ds_bound = P.ds_bound
    disp_kind = P.disp_kind
    disp_c = P.disp_c
    disp_s = P.disp_s
    disp_kernel = P.disp_kernel
    disp_cum = P.disp_cum
    disp_newclan = P.disp_newclan
    mig_out = P.mig_out
    mig_max = P.mig_max
    mig_cum = P.mig_cum
    diff = P.diff
    nb = q * q
    nch = nb + 3 * q
    rates = np.zeros(nch)
    fast = np.zeros(nb + q)  # N*beta and N*rho parts of birth and death channels
    hpow = np.empty((q, P.max_deg + 1))
    rate_table = P.rate_table  # single-type models: (N*beta, N*rho, N*kappa) by particle count
    use_table = rate_table.shape[0] > 0
    n_tot = 0
    for a in range(q):
        n_tot += count[a]
    iterations = 0
    while True:
        iterations += 1
        total = 0.0
        if use_table:
            n0 = count[0]
            fb = rate_table[n0, 0]
            fd = rate_table[n0, 1]
            fast[0] = fb
            fast[1] = fd
            rates[0] = n0 * (fb + bs_bound[0, 0])
            rates[1] = n0 * (fd + ds_bound[0])
            rates[2] = rate_table[n0, 2]
            rates[3] = n0 * mig_max[0] if finite else 0.0
            total = rates[0] + rates[1] + rates[2] + rates[3]
        else:
            fill_powers(count, N, hpow)
            for i in range(q):
                ni = count[i]
                for j in range(q):
                    f = N * max(eval_poly(poly_exp, poly_coef, poly_start, beta_id[i, j], hpow), 0.0)
                    fast[i * q + j] = f
                    r = ni * (f + bs_bound[i, j])
                    rates[i * q + j] = r
                    total += r
                f = N * max(eval_poly(poly_exp, poly_coef, poly_start, rho_id[i], hpow), 0.0)
                fast[nb + i] = f
                r = ni * (f + ds_bound[i])
                rates[nb + i] = r
                total += r
                r = N * max(eval_poly(poly_exp, poly_coef, poly_start, kappa_id[i], hpow), 0.0)
                rates[nb + q + i] = r
                total += r
                r = ni * mig_max[i] if finite else 0.0
                rates[nb + 2 * q + i] = r
                total += r
        if total <= 0.0:
            counters[6] += iterations
            # nothing can happen: extinct if empty, otherwise frozen until t_end
            if count.sum() == 0:
                return EXTINCT, t
            return REACHED, t_end
        t_next = t + exponential(rng) / total
        if t_next >= t_end:
            counters[6] += iterations
            return REACHED, t_end
        t = t_next
        u = uniform(rng) * total
        ch = 0
        acc = rates[0]
        while acc <= u and ch < nch - 1:
            ch += 1
            acc += rates[ch]
        while rates[ch] == 0.0:  # guard against round-off landing on an empty channel
            ch -= 1

        if ch < nb:
            i = ch // q
            j = ch % q
            k = int(uniform(rng) * count[i])
            if k >= count[i]:
                k = count[i] - 1
            f = fast[ch]
            is_fast = True
            if bs_bound[i, j] > 0.0:
                is_fast = uniform(rng) * (f + bs_bound[i, j]) < f
            if not finite:
                touch(dom, L, diff, pos, tlast, i, k, t, rng)
            if not is_fast:
                fill_powers(count, N, hpow)
                accept = position_rate(P, ch, pos[i, k], hpow)
                if uniform(rng) * bs_bound[i, j] >= accept:
                    counters[REJECTED] += 1
                    continue
            m = count[j]
            pos[j, m, 0] = pos[i, k, 0]
            if not finite:
                pos[j, m, 1] = pos[i, k, 1]
                pos[j, m, 2] = pos[i, k, 2]
                tlast[j, m] = t
            clan[j, m] = clan[i, k]
            count[j] = m + 1
            n_tot += 1
            kind = LOCAL_BIRTH
            dk = disp_kind[i, j]
            if is_fast and dk == 1:
                if uniform(rng) * N < disp_c[i, j]:
                    kind = DISPERSED_BIRTH
                    if disp_kernel[i, j] == 1:
                        pos[j, m, 0] = float(pick_cumulative(disp_cum[i, j, int(pos[i, k, 0])], rng))
                    else:
                        uniform_location(dom, L, K, pos[j, m], rng)
                    if disp_newclan[i, j]:
                        clan[j, m] = uniform(rng)
            elif is_fast and dk == 2:
                kind = DISPERSED_BIRTH
                local_step(dom, L, pos[j, m], disp_s[i, j] / math.sqrt(N), rng)
            site_from = 0
            site_to = 0
            if finite:
                site_from = int(pos[i, k, 0])
                site_to = int(pos[j, m, 0])
                sites[j, site_to] += 1
            counters[kind] += 1
            if trace_t.shape[0] > 0:
                _record(trace_t, trace_v, ntrace, t, kind, i, j, site_from, site_to)
            if n_tot > cap_total:
                counters[6] += iterations
                return EXPLODED, t
        elif ch < nb + q:
            i = ch - nb
            k = int(uniform(rng) * count[i])
            if k >= count[i]:
                k = count[i] - 1
            if ds_bound[i] > 0.0:
                f = fast[ch]
                if uniform(rng) * (f + ds_bound[i]) >= f:
                    touch(dom, L, diff, pos, tlast, i, k, t, rng)
                    fill_powers(count, N, hpow)
                    accept = position_rate(P, ch, pos[i, k], hpow)
                    if uniform(rng) * ds_bound[i] >= accept:
                        counters[REJECTED] += 1
                        continue
            site = 0
            if finite:
                site = int(pos[i, k, 0])
                sites[i, site] -= 1
            last = count[i] - 1
            if k != last:
                pos[i, k, 0] = pos[i, last, 0]
                if not finite:
                    pos[i, k, 1] = pos[i, last, 1]
                    pos[i, k, 2] = pos[i, last, 2]
                    tlast[i, k] = tlast[i, last]
                clan[i, k] = clan[i, last]
            count[i] = last
            n_tot -= 1
            counters[DEATH] += 1
            if trace_t.shape[0] > 0:
                _record(trace_t, trace_v, ntrace, t, DEATH, i, i, site, site)
        elif ch < nb + 2 * q:
            i = ch - nb - q
            m = count[i]
            _immigrant_location(P, i, pos[i, m], rng)
            clan[i, m] = uniform(rng)
            tlast[i, m] = t
            count[i] = m + 1
            n_tot += 1
            site = 0
            if finite:
                site = int(pos[i, m, 0])
                sites[i, site] += 1
            counters[IMMIGRATION] += 1
            if trace_t.shape[0] > 0:
                _record(trace_t, trace_v, ntrace, t, IMMIGRATION, i, i, site, site)
            if n_tot > cap_total:
                counters[6] += iterations
                return EXPLODED, t
        else:
            i = ch - nb - 2 * q
            k = int(uniform(rng) * count[i])
            if k >= count[i]:
                k = count[i] - 1
            site = int(pos[i, k, 0])
            if uniform(rng) * mig_max[i] >= mig_out[i, site]:
                counters[REJECTED] += 1
                continue
            dest = pick_cumulative(mig_cum[i, site], rng)
            pos[i, k, 0] = float(dest)
            sites[i, site] -= 1
            sites[i, dest] += 1
            counters[MIGRATION] += 1
            if trace_t.shape[0] > 0:
                _record(trace_t, trace_v, ntrace, t, MIGRATION, i, i, site, dest)


@njit(cache=True)
def run_site_batch(P, pos0, clan0, count0, sites0, seeds, t_end):
    """Independent FiniteSet runs from one initial state; returns final site counts per replicate."""
    n_rep = seeds.shape[0]
    out = np.empty((n_rep, P.q, P.K), dtype=np.int64)
    pos = pos0.copy()
    clan = clan0.copy()
    tlast = np.zeros(clan0.shape)
    count = count0.copy()
    sites = sites0.copy()
    counters = np.zeros(N_COUNTERS, dtype=np.int64)
    trace_t = np.zeros(0)
    trace_v = np.zeros((0, 5), dtype=np.int32)
    ntrace = np.zeros(1, dtype=np.int64)
    for r in range(n_rep):
        for i in range(P.q):
            count[i] = count0[i]
            for k in range(count0[i]):
                for d in range(3):
                    pos[i, k, d] = pos0[i, k, d]
                clan[i, k] = clan0[i, k]
        sites[:, :] = sites0
        rng = seeds[r].copy()
        advance(P, pos, clan, tlast, count, sites, counters, rng, 0.0, t_end, trace_t, trace_v, ntrace)
        out[r] = sites
    return out
