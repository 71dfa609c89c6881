"""Reference processes for the large-population limit.

Wright-Fisher diffusion on the simplex, exact Moran fixation probabilities,
Poisson-Dirichlet sampling by stick breaking, and an M-particle Moran
approximation of the Fleming-Viot limit built from averaged coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .engine import moran as _mk
from .engine.rng import stream_state
from .flow import AveragedCoefficients
from .model import (
    Circle,
    FiniteSet,
    ModelError,
    Sphere,
    default_test_functions,
    eval_basis,
    parse_basis,
)


class ReferenceError(RuntimeError):
    """A reference computation was asked for something it cannot do faithfully."""


# ---------------------------------------------------------------------------
# Wright-Fisher diffusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WFParams:
    """K-trait diffusion: mutation rates theta[i][j], selection intensities alpha[i], resampling coefficient."""

    K: int
    theta: np.ndarray
    alpha: np.ndarray
    resample: float

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        if th.shape != (self.K, self.K) or self.alpha.shape != (self.K,):
            raise ModelError("WF parameters have inconsistent shapes")
        off = th - np.diag(np.diag(th))
        if (off < 0).any():
            raise ModelError("mutation rates must be nonnegative")
        if self.resample < 0:
            raise ModelError("resampling coefficient must be nonnegative")

    @classmethod
    def from_averaged(cls, avg: AveragedCoefficients) -> "WFParams":
        """Trait frequencies = site frequencies of the limiting process on a FiniteSet."""
        dom = avg.domain
        if not isinstance(dom, FiniteSet):
            raise ReferenceError("Wright-Fisher parameters need a FiniteSet domain")
        Q = avg.mutation_matrix
        return cls(dom.K, Q - np.diag(np.diag(Q)), selection_table(avg), avg.gamma_smpl)

    def drift(self, x: np.ndarray) -> np.ndarray:
        """Mutation inflow minus outflow plus selection, for states x of shape (..., K)."""
        off = self.theta - np.diag(np.diag(self.theta))
        mut = x @ off - x * off.sum(axis=1)
        sel = x * (self.alpha - (x @ self.alpha)[..., None])
        return mut + sel


class WFError(ReferenceError):
    pass


@dataclass
class WFPath:
    times: np.ndarray
    x: np.ndarray  # (n_times, n_paths, K)
    exit_fraction: float


def simulate_wf(params: WFParams, x0, T: float, dt: float = 1e-4, seed: int = 0, n_paths: int = 1,
                record_times: Optional[Sequence[float]] = None, exit_tol: float = 0.05,
                exit_limit: float = 0.01) -> WFPath:
    """Euler-Maruyama paths with covariance 2*resample*x_i(delta_ij - x_j) per unit time.

    Steps are projected onto the simplex by clipping and renormalising.  If
    more than ``exit_limit`` of all steps leave the simplex by more than
    ``exit_tol`` before projection, dt is too coarse and WFError is raised.
    """
    x = np.tile(np.asarray(x0, dtype=float), (n_paths, 1))
    if x.shape[1] != params.K or abs(x[0].sum() - 1) > 1e-12 or (x < 0).any():
        raise WFError("x0 must be a point of the simplex")
    n_steps = int(math.ceil(T / dt - 1e-9))
    dt = T / n_steps if n_steps else dt
    rec = np.array([0.0, T] if record_times is None else record_times, dtype=float)
    rec_steps = np.round(rec / dt).astype(np.int64) if n_steps else np.zeros(len(rec), dtype=np.int64)
    out = np.empty((len(rec), n_paths, params.K))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scale = math.sqrt(2.0 * params.resample * dt)
    exits = 0
    r = 0
    while r < len(rec) and rec_steps[r] == 0:
        out[r] = x
        r += 1
    for step in range(1, n_steps + 1):
        z = rng.standard_normal(x.shape)
        sq = np.sqrt(x)
        noise = sq * z - x * (sq * z).sum(axis=1, keepdims=True)
        x = x + params.drift(x) * dt + scale * noise
        exits += int((x.min(axis=1) < -exit_tol).sum())
        np.clip(x, 0.0, None, out=x)
        x /= x.sum(axis=1, keepdims=True)
        while r < len(rec) and rec_steps[r] == step:
            out[r] = x
            r += 1
    frac = exits / max(1, n_steps * n_paths)
    if frac > exit_limit:
        raise WFError(f"dt={dt:g} too large: {frac:.2%} of steps left the simplex by more than {exit_tol}")
    return WFPath(rec, out, frac)


# ---------------------------------------------------------------------------
# Moran fixation
# ---------------------------------------------------------------------------


def _check_moran(M: int, w: float, k: int) -> None:
    if M > 10_000:
        raise ReferenceError("M above 10^4 exceeds the exact-solve budget")
    if M < 1 or not 0 <= k <= M or w <= 0:
        raise ReferenceError("need M >= 1, 0 <= k <= M and w > 0")


def fixation_ratio_formula(M: int, w: float, k: int) -> float:
    """Closed form (1 - w^-k) / (1 - w^-M), k/M in the neutral case."""
    _check_moran(M, w, k)
    if w == 1.0:
        return k / M
    lw = math.log(w)
    return math.expm1(-k * lw) / math.expm1(-M * lw)


def moran_absorption(M: int, w: float, k: int) -> float:
    """Probability that a type with relative fitness w, starting from k of M, fixes; tridiagonal solve."""
    _check_moran(M, w, k)
    if k in (0, M):
        return float(k == M)
    n = M - 1  # unknowns x_1..x_{M-1}; x_0 = 0, x_M = 1
    ab = np.zeros((3, n))
    ab[0, 1:] = -w
    ab[1, :] = 1.0 + w
    ab[2, :-1] = -1.0
    rhs = np.zeros(n)
    rhs[-1] = w
    sol = scipy.linalg.solve_banded((1, 1), ab, rhs)
    return float(sol[k - 1])


# ---------------------------------------------------------------------------
# Poisson-Dirichlet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PDParams:
    alpha: float
    truncation: Optional[int] = None
    deficit_tol: float = 1e-6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ModelError("Poisson-Dirichlet parameter must be positive")

    @property
    def sticks(self) -> int:
        if self.truncation is not None:
            return int(self.truncation)
        r = self.alpha / (1.0 + self.alpha)
        return max(1, int(math.ceil(math.log(self.deficit_tol) / math.log(r))))


def gem_weights(alpha: float, sticks: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Unsorted GEM(alpha) weights, shape (size, sticks)."""
    v = rng.beta(1.0, alpha, size=(size, sticks))
    remaining = np.cumprod(np.hstack([np.ones((size, 1)), 1.0 - v[:, :-1]]), axis=1)
    return v * remaining


def sample_poisson_dirichlet(params: PDParams, seed: int = 0, size: int = 1) -> np.ndarray:
    """Decreasing rearrangements of truncated GEM draws, shape (size, sticks)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    w = gem_weights(params.alpha, params.sticks, size, rng)
    return -np.sort(-w, axis=1)


# ---------------------------------------------------------------------------
# Moran particle approximation of the Fleming-Viot limit
# ---------------------------------------------------------------------------


def selection_table(avg: AveragedCoefficients) -> np.ndarray:
    """b^s_avg - d^s_avg at every site of a FiniteSet."""
    dom = avg.domain
    sites = np.arange(dom.K, dtype=float)[:, None]
    out = np.zeros(dom.K)
    for sign, terms in ((1.0, avg.b_s_avg), (-1.0, avg.d_s_avg)):
        for name, c in terms:
            out += sign * c * eval_basis(dom, *parse_basis(name, dom), sites)
    return out


def moran_params(avg: AveragedCoefficients, M: int) -> _mk.MoranParams:
    dom = avg.domain
    K = dom.K if isinstance(dom, FiniteSet) else 1
    terms = [(n, c) for n, c in avg.b_s_avg] + [(n, -c) for n, c in avg.d_s_avg]
    codes = [parse_basis(n, dom) for n, _ in terms]
    sel_coef = np.array([c for _, c in terms], dtype=float)
    S = float(np.abs(sel_coef).sum())  # every basis function is bounded by 1 in absolute value
    mig_out = np.zeros(K)
    mig_cum = np.zeros((K, K))
    diff = 0.0
    if isinstance(dom, FiniteSet):
        m = np.array(avg.migration, dtype=float).copy()
        np.fill_diagonal(m, 0.0)
        mig_out = m.sum(axis=1)
        mig_cum = np.cumsum(m, axis=1)
    else:
        diff = float(avg.migration) + avg.dispersal_diffusion
    disp_kernel = 0
    disp_cum = np.zeros((K, K))
    if avg.dispersal_rate > 0 and avg.dispersal_matrix is not None:
        kern = avg.dispersal_matrix / avg.dispersal_rate + np.eye(K)
        disp_kernel = 1
        disp_cum = np.cumsum(np.clip(kern, 0.0, None), axis=1)
    q = len(avg.immigration_rates)
    imm_law = np.zeros(q, dtype=np.int64)
    imm_cum = np.zeros((q, K))
    imm_mean = np.zeros((q, 3))
    imm_conc = np.zeros(q)
    for i, law in enumerate(avg.immigration_laws):
        if law.kind == "weights":
            imm_law[i] = 1
            imm_cum[i] = np.cumsum(law.weights)
        elif law.kind == "vmf":
            imm_law[i] = 2
            imm_mean[i, : len(law.mean)] = law.mean
            imm_conc[i] = law.concentration
    imm_total = float(np.sum(avg.immigration_rates))
    L = dom.circumference if isinstance(dom, Circle) else dom.radius if isinstance(dom, Sphere) else 1.0
    return _mk.MoranParams(
        M=int(M), dom=int(dom.code), L=float(L), K=int(K), gamma=float(avg.gamma_smpl),
        sel_code=np.array([c for c, _ in codes], dtype=np.int64),
        sel_order=np.array([o for _, o in codes], dtype=np.int64), sel_coef=sel_coef, S=S,
        mig_out=mig_out, mig_max=float(mig_out.max()) if K else 0.0, mig_cum=mig_cum, diff=diff,
        disp_rate=float(avg.dispersal_rate), disp_kernel=disp_kernel, disp_cum=disp_cum,
        disp_newclan=(avg.dispersal_new_clan_rate / avg.dispersal_rate) if avg.dispersal_rate > 0 else 0.0,
        imm_total=imm_total,
        imm_type_cum=np.cumsum(avg.immigration_rates) if imm_total > 0 else np.ones(q),
        imm_law=imm_law, imm_cum=imm_cum, imm_mean=imm_mean, imm_conc=imm_conc,
    )


def _factors_value(p: np.ndarray, tables: Sequence[np.ndarray]) -> float:
    return float(np.prod([p @ f for f in tables]))


def limit_generator(avg: AveragedCoefficients, p: np.ndarray, tables: Sequence[np.ndarray]) -> float:
    """Limit generator on F(nu) = prod_l <f_l, nu> for a site distribution p (FiniteSet)."""
    Q = avg.mutation_matrix
    sig = selection_table(avg)
    vals = [float(p @ f) for f in tables]
    m = len(tables)
    out = 0.0
    for l in range(m):
        rest = np.prod([vals[j] for j in range(m) if j != l])
        out += (float(p @ (Q @ tables[l])) + float(p @ (sig * tables[l])) - float(p @ sig) * vals[l]) * rest
        for k in range(m):
            if k != l:
                rest2 = np.prod([vals[j] for j in range(m) if j not in (l, k)])
                out += avg.gamma_smpl * (float(p @ (tables[l] * tables[k])) - vals[l] * vals[k]) * rest2
    return out


def moran_generator(avg: AveragedCoefficients, M: int, counts: np.ndarray, tables: Sequence[np.ndarray]) -> float:
    """Exact generator of the M-particle chain on F = prod_l <f_l, nu_M> (FiniteSet)."""
    Q = avg.mutation_matrix
    sig = selection_table(avg)
    S = float(np.abs([c for _, c in avg.b_s_avg]).sum() + np.abs([c for _, c in avg.d_s_avg]).sum())
    n = np.asarray(counts, dtype=float)
    base = _factors_value(n / M, tables)
    K = len(n)
    total = 0.0
    for x in range(K):
        for y in range(K):
            if x == y or n[x] == 0:
                continue
            moved = n.copy()
            moved[x] += 1
            moved[y] -= 1
            if n[y] > 0:  # a particle at y copies one at x
                rate = n[x] * n[y] * (avg.gamma_smpl + (sig[x] + S) / M)
                total += rate * (_factors_value(moved / M, tables) - base)
            jump = n.copy()
            jump[x] -= 1
            jump[y] += 1
            total += n[x] * Q[x, y] * (_factors_value(jump / M, tables) - base)
    return total


@dataclass(frozen=True)
class CalibrationResult:
    name: str
    z: float
    estimate: float
    exact_finite_M: float
    limit: float
    stderr: float


class CalibrationError(ReferenceError):
    pass


def moran_calibration(avg: AveragedCoefficients, M: int, seed: int = 0, replicates: int = 20000,
                      z_limit: float = 4.0) -> list[CalibrationResult]:
    """Check the pair rate against the generator: Monte-Carlo difference quotients vs exact values.

    Uses a FiniteSet configuration spread evenly over the sites and the
    functions <f, nu>, <f, nu>^2 with f the indicator of site 0.
    """
    dom = avg.domain
    if not isinstance(dom, FiniteSet):
        raise ReferenceError("calibration runs on FiniteSet domains")
    P = moran_params(avg, M)
    K = dom.K
    counts0 = np.full(K, M // K)
    counts0[: M - counts0.sum()] += 1
    pos0 = np.zeros((M, 3))
    pos0[:, 0] = np.repeat(np.arange(K), counts0)
    total_rate = P.gamma * M * (M - 1) + 2 * P.S * (M - 1) + M * (P.mig_max + P.disp_rate + P.imm_total)
    # about a thousand events per run, short on the scale on which the tested moments move
    slow = 2 * P.gamma + 2 * P.S + float(np.abs(np.diag(avg.mutation_matrix)).max())
    delta = min(1000.0 / max(total_rate, 1e-300), 0.01 / max(slow, 1e-300))
    seeds = np.stack([stream_state(seed, r, 3) for r in range(replicates)])
    finals = _mk.moran_site_batch(P, pos0, seeds, delta)
    f = (np.arange(K) == 0).astype(float)
    out = []
    for name, tables in (("<f,nu>", [f]), ("<f,nu>^2", [f, f])):
        vals = np.prod([finals @ t / M for t in tables], axis=0)
        diffs = (vals - _factors_value(counts0 / M, tables)) / delta
        est = float(diffs.mean())
        se = float(diffs.std(ddof=1) / math.sqrt(replicates))
        exact = moran_generator(avg, M, counts0, tables)
        z = 0.0 if se == 0 and est == exact else (est - exact) / se if se > 0 else float("inf")
        out.append(CalibrationResult(name, z, est, exact, limit_generator(avg, counts0 / M, tables), se))
    bad = [r for r in out if not abs(r.z) < z_limit]
    if bad:
        raise CalibrationError("pair-rate calibration failed: " + "; ".join(
            f"{r.name}: z={r.z:.2f} (MC {r.estimate:.4g}, exact {r.exact_finite_M:.4g})" for r in bad))
    return out


@dataclass
class MoranResult:
    M: int
    times: np.ndarray
    observables: dict  # name -> (G,) values of <f, nu_M>
    locations: np.ndarray
    clans: np.ndarray
    counters: dict
    clan_sizes: Optional[list] = None
    calibration: list = field(default_factory=list)


def moran_fv(avg: AveragedCoefficients, M: int, T: float, seed: int = 0,
             record_times: Optional[Sequence[float]] = None, initial: Optional[np.ndarray] = None,
             observers: Optional[Sequence[str]] = None, calibrate: bool = True, clan_sizes: bool = False,
             calibration_replicates: int = 20000, replicate: int = 0) -> MoranResult:
    """M exchangeable particles approximating the limiting Fleming-Viot process."""
    if M < 100:
        raise ReferenceError("the Moran approximation needs M >= 100")
    dom = avg.domain
    calib = []
    if calibrate and isinstance(dom, FiniteSet):
        calib = moran_calibration(avg, M, seed, calibration_replicates)
    P = moran_params(avg, M)
    rng_np = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate, 1)))
    loc = dom.uniform(rng_np, M) if initial is None else np.asarray(initial, dtype=float)
    if loc.shape != (M, dom.dim):
        raise ReferenceError(f"initial locations must have shape ({M}, {dom.dim})")
    pos = np.zeros((M, 3))
    pos[:, : dom.dim] = loc
    clan = rng_np.uniform(size=M)
    tlast = np.zeros(M)
    counters = np.zeros(6, dtype=np.int64)
    rng = stream_state(seed, replicate, 4)
    names = tuple(observers) if observers is not None else default_test_functions(dom)
    grid = np.array([0.0, T] if record_times is None else record_times, dtype=float)
    obs = {n: np.zeros(len(grid)) for n in names}
    sizes = [] if clan_sizes else None
    t = 0.0
    for g, tg in enumerate(grid):
        t = _mk.moran_advance(P, pos, clan, tlast, counters, rng, t, float(tg)) if tg > t else t
        _mk.moran_sync(P, pos, tlast, t, rng)
        for n in names:
            obs[n][g] = eval_basis(dom, *parse_basis(n, dom), pos[:, : dom.dim]).mean()
        if sizes is not None:
            _, c = np.unique(clan, return_counts=True)
            sizes.append(np.sort(c)[::-1] / M)
    names_c = ("resamplings", "selections", "migrations", "dispersals", "immigrations", "rejected")
    return MoranResult(M, grid, obs, pos[:, : dom.dim].copy(), clan.copy(),
                       {k: int(v) for k, v in zip(names_c, counters)}, sizes, calib)


__all__ = [
    "CalibrationError", "CalibrationResult", "MoranResult", "PDParams", "ReferenceError", "WFError", "WFParams",
    "WFPath", "fixation_ratio_formula", "gem_weights", "limit_generator", "moran_absorption",
    "moran_calibration", "moran_fv", "moran_generator", "moran_params", "sample_poisson_dirichlet",
    "selection_table", "simulate_wf",
]
