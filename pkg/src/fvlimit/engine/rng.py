"""xoshiro256** generator usable inside numba kernels, seeded per (seed, replicate)."""

import math

import numpy as np
from numba import njit

_TWO53 = 1.0 / 9007199254740992.0


def stream_state(seed: int, replicate: int = 0, substream: int = 0) -> np.ndarray:
    """Independent 256-bit state for one replicate, derived with numpy's SeedSequence."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replicate), int(substream)))
    state = ss.generate_state(4, dtype=np.uint64)
    if not state.any():
        state[0] = np.uint64(0x9E3779B97F4A7C15)
    return state


@njit(inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(inline="always")
def next_u64(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(inline="always")
def uniform(s):
    """Uniform on the open interval (0, 1)."""
    return ((next_u64(s) >> np.uint64(11)) + 0.5) * _TWO53


@njit(inline="always")
def randint(s, n):
    k = int(uniform(s) * n)
    return k if k < n else n - 1


@njit(inline="always")
def normal(s):
    u1 = uniform(s)
    u2 = uniform(s)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@njit(inline="always")
def normal_pair(s):
    """Two independent standard normals (Marsaglia polar method)."""
    while True:
        a = 2.0 * uniform(s) - 1.0
        b = 2.0 * uniform(s) - 1.0
        r2 = a * a + b * b
        if r2 < 1.0:
            f = math.sqrt(-2.0 * math.log(r2) / r2)
            return a * f, b * f


@njit(inline="always")
def exponential(s):
    return -math.log(uniform(s))


@njit(cache=True)
def fill_uniform(s, out):
    for k in range(out.shape[0]):
        out[k] = uniform(s)
    return out


@njit(cache=True)
def fill_normal(s, out):
    for k in range(out.shape[0]):
        out[k] = normal(s)
    return out
