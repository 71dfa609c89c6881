"""Deterministic density dynamics: interaction matrix, drift, flow, equilibrium and averaged limit coefficients."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.sparse.csgraph import connected_components

from .model import Check, FiniteSet, ModelSpec
from .polynomial import Polynomial


class FlowError(RuntimeError):
    pass


class BoxExitError(FlowError):
    def __init__(self, t_exit: float, h_exit: np.ndarray):
        super().__init__(f"trajectory left the clamp box at t={t_exit:.6g} (h={np.round(h_exit, 6).tolist()})")
        self.t_exit = t_exit
        self.h_exit = h_exit


class EquilibriumError(FlowError):
    def __init__(self, part: str, message: str):
        super().__init__(f"{part} {message}")
        self.part = part


class _Bank:
    """A list of polynomials evaluated together through one shared monomial table."""

    def __init__(self, polys: list[Polynomial], q: int):
        exps = {}
        for p in polys:
            for e in p.terms:
                exps.setdefault(e, len(exps))
        self.exps = np.array(list(exps), dtype=np.int64).reshape(-1, q)
        self.matrix = np.zeros((len(polys), len(exps)))
        for r, p in enumerate(polys):
            for e, c in p.terms.items():
                self.matrix[r, exps[e]] = c

    def __call__(self, h: np.ndarray) -> np.ndarray:
        mono = np.prod(h[..., None, :] ** self.exps, axis=-1)
        return mono @ self.matrix.T


class _Rates:
    """Polynomial forms of A(h), theta(h) and the Jacobian of theta for one spec."""

    def __init__(self, spec: ModelSpec):
        q = spec.q
        self.q = q
        A = [[None] * q for _ in range(q)]
        for i, j in itertools.product(range(q), range(q)):
            A[i][j] = spec.beta[j][i] if i != j else spec.beta[i][i] - spec.rho[i]
        self.A = A
        hv = [Polynomial.variable(k, q) for k in range(q)]
        self.theta = [sum((A[i][j] * hv[j] for j in range(q)), Polynomial.zero(q)) for i in range(q)]
        self.jac = [[self.theta[i].deriv(k) for k in range(q)] for i in range(q)]
        self.A_bank = _Bank([A[i][j] for i in range(q) for j in range(q)], q)
        self.theta_bank = _Bank(self.theta, q)
        self.jac_bank = _Bank([self.jac[i][k] for i in range(q) for k in range(q)], q)


@lru_cache(maxsize=64)
def rates(spec: ModelSpec) -> _Rates:
    return _Rates(spec)


def _check_box(spec: ModelSpec, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape != (spec.q,):
        raise FlowError(f"density vector must have length {spec.q}")
    if (h < -1e-12).any() or (h > spec.H_max * (1 + 1e-12)).any():
        raise FlowError(f"h={h.tolist()} outside the clamp box [0, {spec.H_max}]^{spec.q}")
    return h


def interaction_matrix(spec: ModelSpec, h) -> np.ndarray:
    h = _check_box(spec, h)
    return rates(spec).A_bank(h).reshape(spec.q, spec.q)


def theta(spec: ModelSpec, h) -> np.ndarray:
    h = _check_box(spec, h)
    return rates(spec).theta_bank(h)


def jacobian(spec: ModelSpec, h) -> np.ndarray:
    """Exact Jacobian of theta from the polynomial coefficients."""
    h = _check_box(spec, h)
    return rates(spec).jac_bank(h).reshape(spec.q, spec.q)


def jacobian_fd(spec: ModelSpec, h, step: float = 1e-6) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    th = rates(spec).theta_bank
    out = np.empty((spec.q, spec.q))
    for k in range(spec.q):
        e = np.zeros(spec.q)
        e[k] = step
        out[:, k] = (th(h + e) - th(h - e)) / (2 * step)
    return out


def gronwall_constant(spec: ModelSpec) -> float:
    from .model import rate_grid

    grid = rate_grid(spec)
    total = sum(spec.beta[i][j](grid) for i in range(spec.q) for j in range(spec.q))
    return float(np.max(total))


# --------------------------------------------------------------------------
# flow
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowTrajectory:
    t: np.ndarray
    h: np.ndarray  # (len(t), q)
    solution: object

    def __call__(self, t) -> np.ndarray:
        return self.solution(t).T if np.ndim(t) else self.solution(t)

    @property
    def final(self) -> np.ndarray:
        return self.h[-1]


def _box_events(spec: ModelSpec):
    events = []
    for k in range(spec.q):
        def upper(t, y, k=k):
            return spec.H_max * (1 + 1e-9) - y[k]

        def lower(t, y, k=k):
            return y[k] + 1e-9

        upper.terminal = lower.terminal = True
        events += [upper, lower]
    return events


def integrate_flow(spec: ModelSpec, h0, T: float, tol: float = 1e-10) -> FlowTrajectory:
    """Integrate dh/dt = theta(h) from h0 over [0, T] with an embedded 8(5,3) Runge-Kutta pair."""
    h0 = _check_box(spec, h0)
    th = rates(spec).theta_bank
    sol = solve_ivp(lambda t, y: th(y), (0.0, T), h0, method="DOP853", rtol=tol, atol=tol,
                    dense_output=True, events=_box_events(spec))
    if sol.status == 1:
        t_exit = float(sol.t[-1])
        raise BoxExitError(t_exit, sol.y[:, -1])
    if sol.status != 0:
        raise FlowError(f"flow integration failed: {sol.message}")
    return FlowTrajectory(sol.t, sol.y.T, sol.sol)


# --------------------------------------------------------------------------
# equilibrium
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EquilibriumData:
    h_eq: np.ndarray
    v_eq: np.ndarray
    A: np.ndarray
    J: np.ndarray
    G_bar: np.ndarray
    eig_A: np.ndarray
    eig_J: np.ndarray
    eig_G_bar: np.ndarray
    gamma_smpl: float
    newton_iterations: int

    @property
    def relaxation_time(self) -> float:
        return 1.0 / float(np.min(-self.eig_J.real))

    def summary(self) -> dict:
        def c(v):
            v = np.asarray(v)
            return [complex(x) if abs(complex(x).imag) > 0 else float(np.real(x)) for x in v]

        return {
            "h_eq": self.h_eq.tolist(),
            "v_eq": self.v_eq.tolist(),
            "gamma_smpl": self.gamma_smpl,
            "eig_A": [str(x) for x in c(self.eig_A)],
            "eig_J": [str(x) for x in c(self.eig_J)],
            "eig_G_bar": [str(x) for x in c(self.eig_G_bar)],
            "newton_iterations": self.newton_iterations,
        }


def _sorted_eigs(m: np.ndarray) -> np.ndarray:
    if m.size == 0:
        return np.zeros(0, dtype=complex)
    ev = np.linalg.eigvals(m)
    ev = np.where(np.abs(ev.imag) < 1e-14 * max(1.0, np.abs(ev).max()), ev.real + 0j, ev)
    return ev[np.lexsort((ev.imag, -ev.real))]


def newton(spec: ModelSpec, guess, tol: float = 1e-13, max_iter: int = 100) -> tuple[np.ndarray, int]:
    """Damped Newton iteration on theta; the step is halved until |theta| decreases."""
    r = rates(spec)
    h = np.asarray(guess, dtype=float).copy()
    F = r.theta_bank(h)
    for it in range(max_iter + 1):
        if np.max(np.abs(F)) < tol:
            return h, it
        if it == max_iter:
            break
        Jm = r.jac_bank(h).reshape(spec.q, spec.q)
        try:
            if np.linalg.cond(Jm) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError:
            # singular Jacobian: follow the flow for a unit of time and retry from there
            try:
                hn = integrate_flow(spec, h, 1.0, tol=1e-10).final
            except FlowError:
                raise EquilibriumError("(A)", f"singular Jacobian during Newton at h={h.tolist()}") from None
            if np.array_equal(hn, h):
                raise EquilibriumError("(A)", f"singular Jacobian during Newton at h={h.tolist()}")
            h, F = hn, r.theta_bank(hn)
            continue
        norm0 = np.linalg.norm(F)
        lam = 1.0
        while True:
            hn = h + lam * step
            Fn = r.theta_bank(hn)
            if np.linalg.norm(Fn) < norm0 or lam < 1e-12:
                break
            lam *= 0.5
        if np.array_equal(hn, h):
            break
        h, F = hn, Fn
    raise EquilibriumError("(A)", f"Newton did not converge in {max_iter} iterations (|theta|={np.abs(F).max():.3g})")


def default_guess(spec: ModelSpec) -> np.ndarray:
    """End point of the flow started from a small symmetric density, used when no guess is given."""
    h0 = np.full(spec.q, 0.1 * spec.H_max / spec.q)
    try:
        return integrate_flow(spec, h0, 50.0, tol=1e-8).final
    except FlowError:
        return h0


def left_null_vector(A: np.ndarray) -> np.ndarray:
    _, _, vt = np.linalg.svd(A.T)
    v = vt[-1]
    return v if v.sum() >= 0 else -v


def is_irreducible(A: np.ndarray, rel_tol: float = 1e-14) -> bool:
    q = A.shape[0]
    if q == 1:
        return True
    scale = max(np.abs(A).max(), 1e-300)
    adj = (np.abs(A) > rel_tol * scale).astype(int)
    np.fill_diagonal(adj, 0)
    n, _ = connected_components(adj, directed=True, connection="strong")
    return n == 1


def g_bar(A: np.ndarray, h: np.ndarray) -> np.ndarray:
    q = len(h)
    G = (np.eye(q) - np.outer(h, np.ones(q)) / h.sum()) @ A
    return G[: q - 1, : q - 1] - G[: q - 1, q - 1][:, None]


def _evaluate_equilibrium(spec: ModelSpec, h: np.ndarray, iters: int, zero_tol: float, gap_tol: float):
    """Compute every equilibrium quantity; returns (data, list of (part, name, ok, detail))."""
    A = interaction_matrix(spec, h)
    J = jacobian(spec, h)
    eig_A = _sorted_eigs(A)
    eig_J = _sorted_eigs(J)
    Gb = g_bar(A, h)
    eig_G = _sorted_eigs(Gb)
    v = left_null_vector(A)
    vh = float(v @ h)
    v = v / vh if vh != 0 else v
    gamma = float(np.sum(v**2 * h * np.array([spec.rho[i](h) for i in range(spec.q)])))
    mags = np.sort(np.abs(eig_A))
    simple_zero = mags[0] < zero_tol and (len(mags) == 1 or mags[1] > gap_tol)
    others_neg = simple_zero and all(
        e.real < 0 for e in eig_A if abs(e) >= zero_tol
    )
    results = [
        ("(A)", "equilibrium strictly positive", bool((h > 0).all()), f"h_eq={np.round(h, 12).tolist()}"),
        ("(A)", "equilibrium isolated", abs(np.linalg.det(J)) > 1e-12,
         f"det J={np.linalg.det(J):.3g}"),
        ("(B)", "Jacobian stable", bool((eig_J.real < 0).all()),
         "eig J=" + ", ".join(f"{e:.6g}" for e in eig_J)),
        ("(C)", "irreducibility", is_irreducible(A),
         "A(h_eq) " + ("irreducible" if is_irreducible(A) else "block-diagonal/reducible")),
        ("(C)", "zero is a simple eigenvalue of A(h_eq), others negative", bool(others_neg),
         "eig A=" + ", ".join(f"{e:.6g}" for e in eig_A)),
        ("(C)", "left null vector positive", bool((v > 0).all()) and simple_zero,
         f"v_eq={np.round(v, 12).tolist()}"),
        ("(C)", "G_bar stable", bool((eig_G.real < 0).all()),
         "eig G_bar=" + ", ".join(f"{e:.6g}" for e in eig_G) if len(eig_G) else "q=1"),
    ]
    data = EquilibriumData(h, v, A, J, Gb, eig_A, eig_J, eig_G, gamma, iters)
    return data, results


def find_equilibrium(spec: ModelSpec, guess=None, tol: float = 1e-13,
                     zero_tol: float = 1e-8, gap_tol: float = 1e-4) -> EquilibriumData:
    guess = default_guess(spec) if guess is None else np.asarray(guess, dtype=float)
    if (guess <= 0).any():
        raise EquilibriumError("(A)", "guess must lie in the positive orthant")
    h, iters = newton(spec, guess, tol)
    if (h > spec.H_max).any():
        raise EquilibriumError("(A)", f"equilibrium {h.tolist()} outside the clamp box")
    data, results = _evaluate_equilibrium(spec, h, iters, zero_tol, gap_tol)
    for part, name, ok, detail in results:
        if not ok:
            raise EquilibriumError(part, f"{name} failed: {detail}")
    return data


def assumption_checks(spec: ModelSpec, guess=None) -> tuple[list[Check], Optional[EquilibriumData]]:
    """Run every equilibrium check, reporting failures instead of raising."""
    try:
        g = default_guess(spec) if guess is None else np.asarray(guess, dtype=float)
        h, iters = newton(spec, g)
        if (h > spec.H_max).any():
            raise EquilibriumError("(A)", f"equilibrium {h.tolist()} outside the clamp box")
    except EquilibriumError as exc:
        return [Check("equilibrium exists", exc.part, False, str(exc))], None
    checks = [Check("equilibrium exists", "(A)", True, f"h_eq={np.round(h, 12).tolist()}")]
    data, results = _evaluate_equilibrium(spec, h, iters, 1e-8, 1e-4)
    checks += [Check(name, part, ok, detail) for part, name, ok, detail in results]
    return checks, data


# --------------------------------------------------------------------------
# averaged coefficients of the limit
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AveragedCoefficients:
    migration_weights: np.ndarray  # v_eq,i h_eq,i
    migration: object  # FiniteSet: averaged rate matrix; continuous: averaged diffusion coefficient
    gamma_smpl: float
    b_s_avg: tuple[tuple[str, float], ...]
    d_s_avg: tuple[tuple[str, float], ...]
    dispersal_weights: np.ndarray  # beta_ij(h_eq) v_eq,j h_eq,i
    dispersal_rate: float  # total jump rate of the rare-dispersal part of C_avg
    dispersal_diffusion: float  # extra diffusion from local dispersal, generator (D/2) Laplacian
    dispersal_matrix: Optional[np.ndarray]  # FiniteSet: averaged jump rate matrix from C_avg
    new_clan_rate: float  # rate at which a lineage receives a fresh clan label
    dispersal_new_clan_rate: float  # the part of new_clan_rate due to dispersal
    immigration_rates: np.ndarray  # kappa_i(h_eq) v_eq,i
    immigration_laws: tuple
    domain: object

    @property
    def mutation_matrix(self) -> Optional[np.ndarray]:
        """FiniteSet generator of B_avg + C_avg + I_avg (rows sum to zero)."""
        if not isinstance(self.domain, FiniteSet):
            return None
        K = self.domain.K
        m = np.array(self.migration, dtype=float).copy()
        if self.dispersal_matrix is not None:
            m += self.dispersal_matrix
        for rate, law in zip(self.immigration_rates, self.immigration_laws):
            if rate > 0:
                w = np.full(K, 1.0 / K) if law.kind == "uniform" else np.array(law.weights) / np.sum(law.weights)
                m += rate * (np.outer(np.ones(K), w) - np.eye(K))
        return m


def averaged_coefficients(spec: ModelSpec, eq: EquilibriumData) -> AveragedCoefficients:
    h, v = eq.h_eq, eq.v_eq
    q = spec.q
    w = v * h
    dom = spec.domain
    if isinstance(dom, FiniteSet):
        migration = sum(w[i] * dom.matrix(i) for i in range(q))
    else:
        migration = float(sum(w[i] * dom.diffusion[i] for i in range(q)))

    def collect(pairs):
        acc: dict[str, float] = {}
        for name, c in pairs:
            acc[name] = acc.get(name, 0.0) + c
        return tuple(sorted((k, v_) for k, v_ in acc.items() if v_ != 0.0))

    bs = []
    for i, j in itertools.product(range(q), range(q)):
        term = spec.b_s[i][j]
        if term is not None:
            bs += [(name, c * v[j] * h[i]) for name, c in term.at_density(h)]
    ds = []
    for i in range(q):
        term = spec.d_s[i]
        if term is not None:
            ds += [(name, c * v[i] * h[i]) for name, c in term.at_density(h)]

    beta_eq = np.array([[spec.beta[i][j](h) for j in range(q)] for i in range(q)])
    dw = beta_eq * np.outer(h, v)
    jump = diff = disp_clan = 0.0
    dmat = None
    for i, j in itertools.product(range(q), range(q)):
        d = spec.dispersal[i][j]
        if d is None:
            continue
        if d.kind == "rare":
            jump += dw[i, j] * d.c
            if d.new_clan:
                disp_clan += dw[i, j] * d.c
            if isinstance(dom, FiniteSet):
                K = dom.K
                kern = np.full((K, K), 1.0 / K) if d.kernel == "uniform" else np.array(d.matrix, dtype=float)
                part = dw[i, j] * d.c * (kern - np.eye(K))
                dmat = part if dmat is None else dmat + part
        else:
            diff += dw[i, j] * d.s**2
    kap = np.array([spec.kappa[i](h) for i in range(q)]) * v
    clan_rate = disp_clan + (float(kap.sum()) if spec.track_clans else 0.0)
    return AveragedCoefficients(
        migration_weights=w,
        migration=migration,
        gamma_smpl=eq.gamma_smpl,
        b_s_avg=collect(bs),
        d_s_avg=collect(ds),
        dispersal_weights=dw,
        dispersal_rate=float(jump),
        dispersal_diffusion=float(diff),
        dispersal_matrix=dmat,
        new_clan_rate=float(clan_rate),
        dispersal_new_clan_rate=float(disp_clan),
        immigration_rates=kap,
        immigration_laws=spec.immigration,
        domain=dom,
    )
