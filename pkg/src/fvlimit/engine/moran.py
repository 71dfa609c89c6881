"""Event loop of the M-particle Moran approximation of the limiting Fleming-Viot process (numba).

Every ordered pair (a, b) resamples (b takes a's location and label) at
rate ``gamma``; selection adds pair rate ``(sigma(x_a) + S) / M`` with
``S`` a bound on |sigma|.  Between resampling events each particle moves
under the averaged mutation mechanism: site jumps or diffusion, rare
dispersal jumps and immigration redraws.  All total rates are constant, so
a single exponential clock drives the loop.
"""

import math
from collections import namedtuple

import numpy as np
from numba import njit

from .geometry import FINITE, SPHERE, diffuse, pick_cumulative, uniform_location, vmf_sphere, von_mises_angle
from .kernel import eval_basis
from .rng import exponential, uniform

MoranParams = namedtuple(
    "MoranParams",
    [
        "M", "dom", "L", "K", "gamma",
        "sel_code", "sel_order", "sel_coef", "S",
        "mig_out", "mig_max", "mig_cum", "diff",
        "disp_rate", "disp_kernel", "disp_cum", "disp_newclan",
        "imm_total", "imm_type_cum", "imm_law", "imm_cum", "imm_mean", "imm_conc",
    ],
)

RESAMPLE, SELECT, MIGRATE, DISPERSE, IMMIGRATE, REJECT = range(6)


@njit(cache=True)
def sigma(P, x):
    total = 0.0
    for t in range(P.sel_code.shape[0]):
        total += P.sel_coef[t] * eval_basis(P.dom, P.L, P.sel_code[t], P.sel_order[t], x)
    return total


@njit(cache=True)
def _touch(P, pos, tlast, a, t, rng):
    if P.dom != FINITE:
        dt = t - tlast[a]
        if dt > 0.0:
            diffuse(P.dom, P.L, pos[a], P.diff * dt, rng)
    tlast[a] = t


@njit(cache=True)
def moran_sync(P, pos, tlast, t, rng):
    for a in range(pos.shape[0]):
        _touch(P, pos, tlast, a, t, rng)


@njit(cache=True)
def _immigrant(P, x, rng):
    i = pick_cumulative(P.imm_type_cum, rng)
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
def moran_advance(P, pos, clan, tlast, counters, rng, t, t_end):
    M = P.M
    r_res = P.gamma * M * (M - 1)
    r_sel = 2.0 * P.S * (M - 1)
    r_mig = M * P.mig_max if P.dom == FINITE else 0.0
    r_disp = M * P.disp_rate
    r_imm = M * P.imm_total
    total = r_res + r_sel + r_mig + r_disp + r_imm
    if total <= 0.0 or M < 1:
        return t_end
    while True:
        t += exponential(rng) / total
        if t >= t_end:
            return t_end
        u = uniform(rng) * total
        if u < r_res + r_sel:
            a = int(uniform(rng) * M)
            b = int(uniform(rng) * (M - 1))
            if a >= M:
                a = M - 1
            if b >= M - 1:
                b = M - 2
            if b >= a:
                b += 1
            if u >= r_res:
                _touch(P, pos, tlast, a, t, rng)
                if uniform(rng) * 2.0 * P.S >= sigma(P, pos[a]) + P.S:
                    counters[REJECT] += 1
                    continue
                kind = SELECT
            else:
                _touch(P, pos, tlast, a, t, rng)
                kind = RESAMPLE
            pos[b, 0] = pos[a, 0]
            pos[b, 1] = pos[a, 1]
            pos[b, 2] = pos[a, 2]
            tlast[b] = t
            clan[b] = clan[a]
            counters[kind] += 1
            continue
        u -= r_res + r_sel
        a = int(uniform(rng) * M)
        if a >= M:
            a = M - 1
        if u < r_mig:
            site = int(pos[a, 0])
            if uniform(rng) * P.mig_max >= P.mig_out[site]:
                counters[REJECT] += 1
                continue
            pos[a, 0] = float(pick_cumulative(P.mig_cum[site], rng))
            counters[MIGRATE] += 1
        elif u < r_mig + r_disp:
            _touch(P, pos, tlast, a, t, rng)
            if P.disp_kernel == 1:
                pos[a, 0] = float(pick_cumulative(P.disp_cum[int(pos[a, 0])], rng))
            else:
                uniform_location(P.dom, P.L, P.K, pos[a], rng)
            if uniform(rng) < P.disp_newclan:
                clan[a] = uniform(rng)
            counters[DISPERSE] += 1
        else:
            _immigrant(P, pos[a], rng)
            tlast[a] = t
            clan[a] = uniform(rng)
            counters[IMMIGRATE] += 1


@njit(cache=True)
def moran_site_batch(P, pos0, seeds, t_end):
    """Final site counts of independent short runs from one FiniteSet configuration."""
    n_rep = seeds.shape[0]
    out = np.zeros((n_rep, P.K), dtype=np.int64)
    M = pos0.shape[0]
    pos = pos0.copy()
    clan = np.zeros(M)
    tlast = np.zeros(M)
    counters = np.zeros(6, dtype=np.int64)
    for r in range(n_rep):
        for a in range(M):
            pos[a, 0] = pos0[a, 0]
        rng = seeds[r].copy()
        moran_advance(P, pos, clan, tlast, counters, rng, 0.0, t_end)
        for a in range(M):
            out[r, int(pos[a, 0])] += 1
    return out
