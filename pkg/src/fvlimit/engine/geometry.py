"""Numba samplers for motion and location laws on the supported domains.

Continuous motion follows the generator (D/2)Laplacian, so a particle left
alone for time dt has per-coordinate displacement variance D*dt.
"""

import math

import numpy as np
from numba import njit

from .rng import normal, normal_pair, uniform

FINITE, CIRCLE, SPHERE, INTERVAL = 0, 1, 2, 3

# below this value of D*dt/R^2 a tangent Gaussian step is used on the sphere
SPHERE_SMALL_STEP = 1e-3


@njit(cache=True)
def tangent_basis(x0, x1, x2):
    """Orthonormal pair spanning the tangent plane at the unit vector (x0, x1, x2)."""
    if abs(x0) < 0.9:
        a0, a1, a2 = 1.0, 0.0, 0.0
    else:
        a0, a1, a2 = 0.0, 1.0, 0.0
    d = a0 * x0 + a1 * x1 + a2 * x2
    b0 = a0 - d * x0
    b1 = a1 - d * x1
    b2 = a2 - d * x2
    n = math.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
    b0 /= n
    b1 /= n
    b2 /= n
    return b0, b1, b2, x1 * b2 - x2 * b1, x2 * b0 - x0 * b2, x0 * b1 - x1 * b0


@njit(cache=True)
def _set_normalized(x, y0, y1, y2):
    n = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
    x[0] = y0 / n
    x[1] = y1 / n
    x[2] = y2 / n


@njit(cache=True)
def _rotate_to(x, cos_a, phi):
    """Move unit vector x to the point at polar angle acos(cos_a) and azimuth phi around x."""
    e10, e11, e12, e20, e21, e22 = tangent_basis(x[0], x[1], x[2])
    sin_a = math.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    c = math.cos(phi) * sin_a
    s = math.sin(phi) * sin_a
    _set_normalized(x, cos_a * x[0] + c * e10 + s * e20, cos_a * x[1] + c * e11 + s * e21,
                    cos_a * x[2] + c * e12 + s * e22)


@njit(cache=True)
def heat_kernel_cdf(u, tau):
    """CDF of cos(angle) after spherical Brownian motion run for scaled time tau."""
    total = 0.5 * (u + 1.0)
    p_prev = 1.0  # P_{l-1}
    p_cur = u  # P_l
    l = 1
    while True:
        w = math.exp(-0.5 * l * (l + 1) * tau)
        if w < 1e-17:
            break
        p_next = ((2 * l + 1) * u * p_cur - l * p_prev) / (l + 1)
        total += 0.5 * w * (p_next - p_prev)
        p_prev = p_cur
        p_cur = p_next
        l += 1
    return total


@njit(cache=True)
def sample_heat_kernel_cos(tau, s):
    target = uniform(s)
    lo, hi = -1.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if heat_kernel_cdf(mid, tau) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def sphere_step(x, tau, s):
    """Brownian increment on the unit sphere over scaled time tau = D*dt/R^2."""
    if tau <= 0.0:
        return
    if tau < SPHERE_SMALL_STEP:
        sphere_step_small(x, math.sqrt(tau), s)
    else:
        cos_a = sample_heat_kernel_cos(tau, s)
        _rotate_to(x, cos_a, 2.0 * math.pi * uniform(s))


@njit(cache=True)
def reflect_unit(y):
    y = y % 2.0
    if y > 1.0:
        y = 2.0 - y
    return y


@njit(cache=True)
def diffuse(dom, L, x, variance, s):
    """Advance location x (length-3 view) by a Brownian increment with the given variance."""
    if variance <= 0.0:
        return
    if dom == CIRCLE:
        x[0] = (x[0] + math.sqrt(variance) * normal(s)) % L
    elif dom == INTERVAL:
        x[0] = reflect_unit(x[0] + math.sqrt(variance) * normal(s))
    elif dom == SPHERE:
        sphere_step(x, variance / (L * L), s)


@njit(cache=True)
def uniform_location(dom, L, K, x, s):
    if dom == FINITE:
        k = int(uniform(s) * K)
        x[0] = float(k if k < K else K - 1)
    elif dom == CIRCLE:
        x[0] = uniform(s) * L
    elif dom == INTERVAL:
        x[0] = uniform(s)
    else:
        z0 = normal(s)
        z1 = normal(s)
        z2 = normal(s)
        n = math.sqrt(z0 * z0 + z1 * z1 + z2 * z2)
        x[0] = z0 / n
        x[1] = z1 / n
        x[2] = z2 / n


@njit(cache=True)
def pick_cumulative(cum, s):
    """Index drawn from a cumulative weight vector whose last entry is the total."""
    u = uniform(s) * cum[cum.shape[0] - 1]
    for k in range(cum.shape[0]):
        if u < cum[k]:
            return k
    return cum.shape[0] - 1


@njit(cache=True)
def von_mises_angle(kappa, s):
    """Best-Fisher rejection sampler, angle in (-pi, pi]."""
    a = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
    b = (a - math.sqrt(2.0 * a)) / (2.0 * kappa)
    r = (1.0 + b * b) / (2.0 * b)
    while True:
        u1 = uniform(s)
        z = math.cos(math.pi * u1)
        f = (1.0 + r * z) / (r + z)
        c = kappa * (r - f)
        u2 = uniform(s)
        if c * (2.0 - c) - u2 > 0.0 or math.log(c / u2) + 1.0 - c >= 0.0:
            break
    ang = math.acos(max(-1.0, min(1.0, f)))
    return ang if uniform(s) > 0.5 else -ang


@njit(cache=True)
def vmf_sphere(mean, kappa, x, s):
    """Wood's sampler specialised to the 2-sphere."""
    u = uniform(s)
    w = 1.0 + math.log(u + (1.0 - u) * math.exp(-2.0 * kappa)) / kappa
    x[0] = mean[0]
    x[1] = mean[1]
    x[2] = mean[2]
    _rotate_to(x, max(-1.0, min(1.0, w)), 2.0 * math.pi * uniform(s))


@njit(cache=True)
def local_step(dom, L, x, sd, s):
    """Gaussian displacement with per-coordinate standard deviation sd."""
    if dom == SPHERE:
        sphere_step_small(x, sd / L, s)
    else:
        diffuse(dom, L, x, sd * sd, s)


@njit(cache=True)
def sphere_step_small(x, ang_sd, s):
    """Tangent-plane Gaussian step mapped back with the exponential map."""
    z1, z2 = normal_pair(s)
    z1 *= ang_sd
    z2 *= ang_sd
    a2 = z1 * z1 + z2 * z2
    if a2 == 0.0:
        return
    e10, e11, e12, e20, e21, e22 = tangent_basis(x[0], x[1], x[2])
    # the geodesic point at angle a is the normalisation of x + tan(a)/a * v
    if a2 < 2.5e-3:
        g = 1.0 + a2 * (1.0 / 3.0 + a2 * (2.0 / 15.0 + a2 * (17.0 / 315.0)))
        _set_normalized(x, x[0] + g * (z1 * e10 + z2 * e20), x[1] + g * (z1 * e11 + z2 * e21),
                        x[2] + g * (z1 * e12 + z2 * e22))
        return
    a = math.sqrt(a2)
    ca = math.cos(a)
    sa = math.sin(a) / a
    _set_normalized(x, ca * x[0] + sa * (z1 * e10 + z2 * e20), ca * x[1] + sa * (z1 * e11 + z2 * e21),
                    ca * x[2] + sa * (z1 * e12 + z2 * e22))
