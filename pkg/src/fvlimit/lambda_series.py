"""Mixing weights Lambda(h): power series at the equilibrium and transport along the flow.

Lambda solves ``A(h)^T Lambda + [J Lambda] theta = 0`` with ``Lambda(h_eq) = v_eq``.
Writing ``h = h_eq + P y`` with P the eigenvector matrix of the Jacobian
``J theta(h_eq) = P diag(lam) P^-1``, the coefficient of ``y^alpha`` obeys

    (A(h_eq)^T + (alpha . lam) I) g_alpha = -(terms from lower degrees),

so each degree is a block-diagonal solve.  Points farther out are reached
by following the flow into the ball where the truncated series is
certified, and carrying the series value back with the transport matrix.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

from .flow import EquilibriumData, interaction_matrix, rates, theta
from .model import ModelSpec, PopulationState


class LambdaError(RuntimeError):
    """Series construction or extension failed."""


def multi_indices(q: int, k: int) -> list[tuple[int, ...]]:
    """All alpha with |alpha| = k, in graded lexicographic (descending) order."""
    out = set()
    for combo in itertools.combinations_with_replacement(range(q), k):
        a = [0] * q
        for c in combo:
            a[c] += 1
        out.add(tuple(a))
    return sorted(out, reverse=True)


# ---------------------------------------------------------------------------
# small complex polynomial algebra: dict alpha -> coefficient
# ---------------------------------------------------------------------------


def _mul(a: dict, b: dict, max_deg: int) -> dict:
    out = defaultdict(complex)
    for e1, c1 in a.items():
        d1 = sum(e1)
        for e2, c2 in b.items():
            if d1 + sum(e2) <= max_deg:
                out[tuple(x + y for x, y in zip(e1, e2))] += c1 * c2
    return dict(out)


def _affine_images(center, lin) -> list[dict]:
    q = lin.shape[0]
    images = []
    for k in range(q):
        img = {(0,) * q: complex(center[k])}
        for l in range(q):
            e = tuple(int(m == l) for m in range(q))
            img[e] = img.get(e, 0) + complex(lin[k, l])
        images.append(img)
    return images


def _compose(terms: dict, center, lin, max_deg: int) -> dict:
    """Coefficients of p(center + lin @ y) up to total degree max_deg."""
    q = lin.shape[0]
    images = _affine_images(center, lin)
    cache = [{0: {(0,) * q: 1.0 + 0j}} for _ in range(q)]

    def power(k, e):
        if e not in cache[k]:
            cache[k][e] = _mul(power(k, e - 1), images[k], max_deg)
        return cache[k][e]

    out = defaultdict(complex)
    for exp, c in terms.items():
        term = {(0,) * q: complex(c)}
        for k, e in enumerate(exp):
            if e:
                term = _mul(term, power(k, e), max_deg)
        for a, v in term.items():
            out[a] += v
    return dict(out)


# ---------------------------------------------------------------------------
# series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DegreeDiagnostics:
    k: int
    size: int
    condition: float
    dominant: bool
    inverse_norm: float
    varah_bound: Optional[float]
    proof_bound: float  # 1/(k eps0)
    bound_ok: Optional[bool]


@dataclass(frozen=True)
class LambdaSeries:
    """Truncated Taylor series of Lambda around h_eq, in the coordinates x = h - h_eq."""

    center: np.ndarray
    alphas: np.ndarray  # (n, q) exponents, graded order
    gammas: np.ndarray  # (n, q) coefficient vectors
    k_max: int
    r_trust: float
    C_hat: float
    eps0: float
    diagnostics: tuple[DegreeDiagnostics, ...] = ()
    notes: tuple[str, ...] = ()

    @property
    def q(self) -> int:
        return len(self.center)

    def coefficient(self, alpha) -> np.ndarray:
        idx = np.flatnonzero((self.alphas == np.asarray(alpha)).all(axis=1))
        return self.gammas[idx[0]].copy() if len(idx) else np.zeros(self.q)

    def __call__(self, h) -> np.ndarray:
        x = np.asarray(h, dtype=float) - self.center
        mono = np.prod(x[..., None, :] ** self.alphas, axis=-1)
        return mono @ self.gammas

    def jacobian(self, h) -> np.ndarray:
        """[J Lambda](h), exact derivative of the truncated series; shape (q, q)."""
        x = np.asarray(h, dtype=float) - self.center
        jac = np.zeros((self.q, self.q))
        for k in range(self.q):
            a = self.alphas[:, k]
            mask = a > 0
            if not mask.any():
                continue
            e = self.alphas[mask].copy()
            e[:, k] -= 1
            mono = np.prod(x ** e, axis=-1) * a[mask]
            jac[:, k] = mono @ self.gammas[mask]
        return jac

    def growth_ok(self) -> bool:
        """|gamma_alpha|_inf <= C_hat^|alpha| for every stored alpha of positive degree."""
        deg = self.alphas.sum(axis=1)
        m = deg > 0
        lhs = np.abs(self.gammas[m]).max(axis=1)
        return bool((lhs <= self.C_hat ** deg[m] * (1 + 1e-12)).all())

    def table(self) -> list[tuple[tuple[int, ...], np.ndarray]]:
        return [(tuple(int(v) for v in a), g) for a, g in zip(self.alphas, self.gammas)]


def _eigenbasis(J: np.ndarray, cond_limit: float):
    lam, P = np.linalg.eig(J)
    cond = np.linalg.cond(P)
    if not np.isfinite(cond) or cond > cond_limit:
        raise LambdaError(
            f"Jacobian at h_eq is not (numerically) diagonalizable: eigenvector condition {cond:.3g}; "
            "unsupported")
    return lam, P, np.linalg.inv(P), cond


def solve_series(spec: ModelSpec, eq: EquilibriumData, k_max: int = 8, residual_tol: float = 1e-8,
                 cond_limit: float = 1e12, eig_cond_limit: float = 1e8) -> LambdaSeries:
    """Taylor coefficients of Lambda at h_eq up to total degree k_max, with a certified trust radius."""
    if k_max < 0:
        raise LambdaError("k_max must be nonnegative")
    q = spec.q
    h_eq = eq.h_eq
    lam, P, Pinv, eig_cond = _eigenbasis(eq.J, eig_cond_limit)
    notes = []
    if (np.abs(lam.imag) > np.abs(lam.real)).any():
        notes.append("strongly oscillatory Jacobian spectrum (|Im| > |Re|); review the series")
    eps0 = float(np.min(-lam.real)) / 4.0
    if eps0 <= 0:
        raise LambdaError("Jacobian at h_eq is not stable")

    r = rates(spec)
    # Taylor data of A^T and of theta in eigen-coordinates
    M = defaultdict(lambda: np.zeros((q, q), dtype=complex))
    for i, j in itertools.product(range(q), range(q)):
        for a, c in _compose(r.A[j][i].terms, h_eq, P, k_max).items():
            M[a][i, j] += c
    T = defaultdict(lambda: np.zeros(q, dtype=complex))
    for k in range(q):
        for a, c in _compose(r.theta[k].terms, h_eq, P, k_max + 1).items():
            if sum(a) >= 2:
                T[a] += Pinv[:, k] * c
    M0 = interaction_matrix(spec, h_eq).T.astype(complex)

    g = {(0,) * q: eq.v_eq.astype(complex)}
    diags = []
    for k in range(1, k_max + 1):
        idx = multi_indices(q, k)
        n = len(idx)
        Xi = np.zeros((q * n, q * n), dtype=complex)
        Y = np.zeros(q * n, dtype=complex)
        for b, alpha in enumerate(idx):
            sl = slice(b * q, (b + 1) * q)
            Xi[sl, sl] = M0 + np.dot(alpha, lam) * np.eye(q)
            rhs = np.zeros(q, dtype=complex)
            for beta, Mb in M.items():
                if sum(beta) == 0:
                    continue
                gamma = tuple(x - y for x, y in zip(alpha, beta))
                if min(gamma) >= 0:
                    rhs += Mb @ g[gamma]
            for beta, tb in T.items():
                for l in range(q):
                    gamma = tuple(a_ - b_ + (m == l) for m, (a_, b_) in enumerate(zip(alpha, beta)))
                    if min(gamma) >= 0 and sum(gamma) < k:
                        rhs += tb[l] * gamma[l] * g[gamma]
            Y[sl] = -rhs
        cond = float(np.linalg.cond(Xi))
        if not np.isfinite(cond) or cond > cond_limit:
            raise LambdaError(f"degree-{k} system numerically singular (condition {cond:.3g})")
        lu = scipy.linalg.lu_factor(Xi)
        X = scipy.linalg.lu_solve(lu, Y)
        for b, alpha in enumerate(idx):
            g[alpha] = X[b * q:(b + 1) * q]
        absX = np.abs(Xi)
        off = absX.sum(axis=1) - np.diag(absX)
        margin = np.diag(absX) - off
        dominant = bool((margin > 0).all())
        inv_norm = float(np.abs(np.linalg.inv(Xi)).sum(axis=1).max())
        proof_bound = 1.0 / (k * eps0)
        varah = float(1.0 / margin.min()) if dominant else None
        diags.append(DegreeDiagnostics(k, q * n, cond, dominant, inv_norm, varah, proof_bound,
                                       (inv_norm <= proof_bound * (1 + 1e-9)) if dominant else None))

    # back to h-coordinates: y = Pinv x
    total = defaultdict(lambda: np.zeros(q, dtype=complex))
    mono_cache = {}
    zero = np.zeros(q)
    for alpha, ga in g.items():
        mono = _compose({alpha: 1.0}, zero, Pinv, k_max)
        mono_cache[alpha] = mono
        for a, c in mono.items():
            total[a] += c * ga
    alphas = [a for k in range(k_max + 1) for a in multi_indices(q, k)]
    gam = np.array([total[a] for a in alphas]).reshape(len(alphas), q)
    scale = max(1.0, float(np.abs(gam).max()))
    imag = float(np.abs(gam.imag).max())
    if imag > 1e-8 * scale:
        notes.append(f"imaginary residue {imag:.2e} discarded when returning to h-coordinates")
    gam = gam.real.copy()
    gam[0] = eq.v_eq

    alphas_arr = np.array(alphas, dtype=np.int64).reshape(len(alphas), q)
    deg = alphas_arr.sum(axis=1)
    C_hat = 1e-12
    for d, row in zip(deg, gam):
        if d > 0:
            C_hat = max(C_hat, float(np.abs(row).max()) ** (1.0 / d))

    provisional = LambdaSeries(h_eq.copy(), alphas_arr, gam, k_max, 0.0, C_hat, eps0, tuple(diags), tuple(notes))
    r_trust = _trust_radius(spec, provisional, residual_tol)
    return LambdaSeries(h_eq.copy(), alphas_arr, gam, k_max, r_trust, C_hat, eps0, tuple(diags), tuple(notes))


def sphere_points(q: int, n_random: int = 16, seed: int = 0) -> np.ndarray:
    """Unit vectors used to probe a sphere around the centre: the coordinate axes plus seeded random ones."""
    eye = np.eye(q)
    rnd = np.random.default_rng(seed).normal(size=(n_random, q))
    rnd /= np.linalg.norm(rnd, axis=1, keepdims=True)
    return np.vstack([eye, -eye, rnd])


def series_residual(spec: ModelSpec, series: LambdaSeries, h) -> float:
    """Largest component of the PDE residual and normalisation defect, exact series derivative."""
    res, norm = pde_residual(spec, series, h, jac=series.jacobian)
    return max(float(np.abs(res).max()), abs(norm))


def _max_radius(spec: ModelSpec, center: np.ndarray) -> float:
    return 0.99 * float(min(center.min(), spec.H_max - center.max()))


def _trust_radius(spec: ModelSpec, series: LambdaSeries, tol: float) -> float:
    dirs = sphere_points(series.q)
    r = min(0.5 / series.C_hat, _max_radius(spec, series.center))
    while r > 1e-8:
        worst = max(series_residual(spec, series, series.center + r * d) for d in dirs)
        if worst < tol:
            return float(r)
        r *= 0.9
    raise LambdaError("no radius found on which the truncated series meets the residual tolerance")


RESIDUAL_FLOOR = 1e-13  # below this the residual is roundoff, not truncation error


def residual_profile(spec: ModelSpec, series: LambdaSeries, radii=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Max residual on spheres of the given radii and the fitted log-log slope.

    Default radii span a factor 20 below the trust radius.  Points under
    RESIDUAL_FLOOR are left out of the fit.
    """
    if radii is None:
        hi = series.r_trust if series.r_trust > 1e-6 else 0.1
        radii = np.geomspace(hi, hi / 20, 7)
    radii = np.asarray(sorted(radii, reverse=True), dtype=float)
    dirs = sphere_points(series.q)
    worst = np.array([max(series_residual(spec, series, series.center + r * d) for d in dirs) for r in radii])
    keep = worst > RESIDUAL_FLOOR
    if keep.sum() < 3:
        raise LambdaError("residual is at roundoff level on all but two radii; use larger radii")
    slope = float(np.polyfit(np.log(radii[keep]), np.log(worst[keep]), 1)[0])
    return radii, worst, slope


# ---------------------------------------------------------------------------
# PDE residual
# ---------------------------------------------------------------------------


def _fd_jacobian(f: Callable, h: np.ndarray, step: float) -> np.ndarray:
    q = len(h)
    cols = []
    for k in range(q):
        e = np.zeros(q)
        e[k] = step
        cols.append((np.asarray(f(h + e)) - np.asarray(f(h - e))) / (2 * step))
    return np.column_stack(cols)


def pde_residual(spec: ModelSpec, lambda_eval: Callable, h, fd_step: float = 1e-5, richardson: bool = False,
                 jac: Optional[Callable] = None) -> tuple[np.ndarray, float]:
    """``A^T(h) Lambda(h) + [J Lambda](h) theta(h)`` and ``<Lambda(h), h> - 1``.

    The Jacobian of Lambda is taken by central differences unless ``jac`` is given.
    """
    h = np.asarray(h, dtype=float)
    lam = np.asarray(lambda_eval(h), dtype=float)
    if jac is not None:
        JL = np.asarray(jac(h), dtype=float)
    elif richardson:
        JL = (4 * _fd_jacobian(lambda_eval, h, fd_step / 2) - _fd_jacobian(lambda_eval, h, fd_step)) / 3
    else:
        JL = _fd_jacobian(lambda_eval, h, fd_step)
    res = interaction_matrix(spec, h).T @ lam + JL @ theta(spec, h)
    return res, float(lam @ h - 1.0)


# ---------------------------------------------------------------------------
# transport along the flow
# ---------------------------------------------------------------------------


@dataclass
class _Joint:
    t: np.ndarray
    psi: np.ndarray  # (n, q)
    R: np.ndarray  # (n, q, q), R(s) = Phi(h, 0, s)
    event_time: Optional[float] = None


def _joint_flow(spec: ModelSpec, h, T: float, tol: float, event=None, t_eval=None) -> _Joint:
    """Integrate psi' = theta(psi) together with R' = R A(psi)^T, R(0) = I."""
    q = spec.q
    r = rates(spec)
    h = np.asarray(h, dtype=float)

    def rhs(_, y):
        psi = y[:q]
        R = y[q:].reshape(q, q)
        A = r.A_bank(psi).reshape(q, q)
        return np.concatenate([A @ psi, (R @ A.T).ravel()])

    y0 = np.concatenate([h, np.eye(q).ravel()])
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=tol, atol=tol, events=event, t_eval=t_eval)
    if sol.status == -1:
        raise LambdaError(f"transport integration failed: {sol.message}")
    ev = None
    if event is not None and len(sol.t_events[0]):
        ev = float(sol.t_events[0][0])
        yv = sol.y_events[0][0]
        return _Joint(np.array([ev]), yv[None, :q], yv[None, q:].reshape(1, q, q), ev)
    y = sol.y.T
    return _Joint(sol.t, y[:, :q], y[:, q:].reshape(-1, q, q))


def transport_matrix(spec: ModelSpec, h, t0: float, t: float = 0.0, tol: float = 1e-11) -> np.ndarray:
    """Phi(h, t, t0): carries Lambda at psi(h, t0) back to psi(h, t), for 0 <= t <= t0."""
    if not 0 <= t <= t0:
        raise LambdaError("need 0 <= t <= t0")
    h = np.asarray(h, dtype=float)
    if t0 == t:
        return np.eye(spec.q)
    if t > 0:  # time shift: Phi(h, t, t0) = Phi(psi(h, t), 0, t0 - t)
        h = _joint_flow(spec, h, t, tol, t_eval=[t]).psi[-1]
    return _joint_flow(spec, h, t0 - t, tol, t_eval=[t0 - t]).R[-1]


def extend_lambda(spec: ModelSpec, series: LambdaSeries, h, T_max: float = 200.0, tol: float = 1e-12,
                  norm_tol: float = 1e-8) -> np.ndarray:
    """Lambda(h) for h whose flow enters the certified ball within T_max."""
    h = np.asarray(h, dtype=float)
    r = series.r_trust
    if np.linalg.norm(h - series.center) < r:
        return series(h)

    def inside(_, y):
        return np.linalg.norm(y[: spec.q] - series.center) - 0.999 * r

    inside.terminal = True
    inside.direction = -1
    try:
        j = _joint_flow(spec, h, T_max, tol, event=inside)
    except Exception as exc:  # leaving the rate box counts as not certified
        raise LambdaError(f"U_eq membership undetermined for h={h.tolist()}: {exc}") from None
    if j.event_time is None:
        raise LambdaError(f"U_eq membership undetermined for h={h.tolist()}: flow did not reach the "
                          f"trust ball (radius {r:.3g}) by T_max={T_max}")
    value = j.R[-1] @ series(j.psi[-1])
    if (value <= 0).any():
        raise LambdaError(f"extended Lambda not positive at h={h.tolist()}")
    if abs(value @ h - 1.0) > norm_tol:
        raise LambdaError(f"<Lambda(h), h> = {value @ h:.12g} deviates from 1 at h={h.tolist()}")
    return value


def lambda_function(spec: ModelSpec, series: LambdaSeries, **kwargs) -> Callable[[np.ndarray], np.ndarray]:
    return lambda h: extend_lambda(spec, series, h, **kwargs)


# ---------------------------------------------------------------------------
# mixing map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedMeasure:
    """Atomic measure: locations with per-atom weights and the type each atom came from."""

    locations: np.ndarray
    types: np.ndarray
    weights: np.ndarray

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


def gamma_map(lambda_eval: Callable, pop: PopulationState, mass_tol: float = 1e-8) -> WeightedMeasure:
    """Collapse the typed population into one probability measure with weights Lambda_i(h)/N."""
    h = np.asarray(pop.counts, dtype=float) / pop.N
    lam = np.asarray(lambda_eval(h), dtype=float)
    locs = [np.asarray(l, dtype=float) for l in pop.locations]
    types = np.concatenate([np.full(len(l), i) for i, l in enumerate(locs)]).astype(np.int64)
    weights = np.concatenate([np.full(len(l), lam[i] / pop.N) for i, l in enumerate(locs)])
    out = WeightedMeasure(np.concatenate(locs) if locs else np.zeros((0, 1)), types, weights)
    if abs(out.total_mass - 1.0) > mass_tol:
        raise LambdaError(f"mixed measure has mass {out.total_mass:.12g}; h outside the certified region?")
    return out


__all__ = [
    "DegreeDiagnostics", "LambdaError", "LambdaSeries", "WeightedMeasure", "extend_lambda", "gamma_map",
    "lambda_function", "multi_indices", "pde_residual", "residual_profile", "series_residual", "solve_series",
    "sphere_points", "transport_matrix",
]
