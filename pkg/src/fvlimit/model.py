"""Spatial domains, model specifications, population states and structural validation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .polynomial import Polynomial


class ModelError(ValueError):
    """A model specification violates a structural invariant."""


# --------------------------------------------------------------------------
# spatial domains
# --------------------------------------------------------------------------

FINITE, CIRCLE, SPHERE, INTERVAL = 0, 1, 2, 3


def _as_matrix(rows) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in row) for row in rows)


@dataclass(frozen=True)
class FiniteSet:
    K: int
    migration: tuple  # per type: K x K rate matrix (rows sum to zero)
    code = FINITE
    dim = 1

    def matrix(self, i: int) -> np.ndarray:
        return np.array(self.migration[i], dtype=float)

    def check(self, q: int) -> None:
        if self.K < 1:
            raise ModelError("FiniteSet needs K >= 1 sites")
        if len(self.migration) != q:
            raise ModelError(f"migration needs one {self.K}x{self.K} matrix per type")
        for i in range(q):
            m = self.matrix(i)
            if m.shape != (self.K, self.K):
                raise ModelError(f"migration[{i}] must be {self.K}x{self.K}, got {m.shape}")
            off = m - np.diag(np.diag(m))
            if (off < 0).any():
                raise ModelError(f"migration[{i}] has a negative off-diagonal rate")
            if np.abs(m.sum(axis=1)).max() > 1e-12:
                raise ModelError(f"migration[{i}] rows must sum to zero")

    def grid(self) -> np.ndarray:
        return np.arange(self.K, dtype=float)[:, None]

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, self.K, size=n).astype(float)[:, None]

    def sq_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return (a[..., 0] != b[..., 0]).astype(float)


@dataclass(frozen=True)
class Circle:
    circumference: float
    diffusion: tuple[float, ...]
    code = CIRCLE
    dim = 1

    def check(self, q: int) -> None:
        if not self.circumference > 0:
            raise ModelError("circumference must be positive")
        _check_diffusion(self.diffusion, q)

    def grid(self) -> np.ndarray:
        return (np.arange(64) * self.circumference / 64)[:, None]

    def uniform(self, rng, n):
        return rng.uniform(0.0, self.circumference, size=n)[:, None]

    def sq_distance(self, a, b):
        d = np.abs(a[..., 0] - b[..., 0]) % self.circumference
        return np.minimum(d, self.circumference - d) ** 2


@dataclass(frozen=True)
class Sphere:
    radius: float
    diffusion: tuple[float, ...]
    code = SPHERE
    dim = 3

    def check(self, q: int) -> None:
        if not self.radius > 0:
            raise ModelError("radius must be positive")
        _check_diffusion(self.diffusion, q)

    def grid(self) -> np.ndarray:
        # Fibonacci lattice plus the poles
        n = 200
        k = np.arange(n) + 0.5
        z = 1 - 2 * k / n
        phi = np.pi * (1 + 5**0.5) * k
        r = np.sqrt(1 - z * z)
        pts = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
        return np.vstack([pts, [[0, 0, 1], [0, 0, -1]]])

    def uniform(self, rng, n):
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def sq_distance(self, a, b):
        c = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
        return (self.radius * np.arccos(c)) ** 2


@dataclass(frozen=True)
class Interval:
    diffusion: tuple[float, ...]
    code = INTERVAL
    dim = 1

    def check(self, q: int) -> None:
        _check_diffusion(self.diffusion, q)

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, 65)[:, None]

    def uniform(self, rng, n):
        return rng.uniform(0.0, 1.0, size=n)[:, None]

    def sq_distance(self, a, b):
        return (a[..., 0] - b[..., 0]) ** 2


def _check_diffusion(diff, q):
    if len(diff) != q:
        raise ModelError("need one diffusion coefficient per type")
    if min(diff) <= 0:
        raise ModelError("diffusion coefficients must be strictly positive")


Domain = FiniteSet | Circle | Sphere | Interval


def check_locations(domain: Domain, loc: np.ndarray) -> None:
    loc = np.asarray(loc, dtype=float)
    if loc.ndim != 2 or loc.shape[1] != domain.dim:
        raise ModelError(f"locations must have shape (n, {domain.dim})")
    if isinstance(domain, FiniteSet):
        s = loc[:, 0]
        if ((s < 0) | (s >= domain.K) | (s != np.floor(s))).any():
            raise ModelError("site index out of range")
    elif isinstance(domain, Circle):
        if ((loc[:, 0] < 0) | (loc[:, 0] >= domain.circumference)).any():
            raise ModelError("angle outside [0, circumference)")
    elif isinstance(domain, Sphere):
        if len(loc) and np.abs(np.linalg.norm(loc, axis=1) - 1).max() > 1e-12:
            raise ModelError("sphere locations must be unit vectors")
    elif ((loc[:, 0] < 0) | (loc[:, 0] > 1)).any():
        raise ModelError("interval location outside [0, 1]")


# --------------------------------------------------------------------------
# basis functions on the domain (position terms and test functions)
# --------------------------------------------------------------------------

B_CONST, B_SITE, B_COS, B_SIN, B_X, B_Y, B_Z, B_ZONAL = range(8)

_ALLOWED = {
    FINITE: {B_CONST, B_SITE},
    CIRCLE: {B_CONST, B_COS, B_SIN},
    SPHERE: {B_CONST, B_X, B_Y, B_Z, B_ZONAL},
    INTERVAL: {B_CONST, B_X, B_COS},
}


def parse_basis(name: str, domain: Domain) -> tuple[int, int]:
    """Map a basis name such as ``site:2`` or ``cos:1`` to a (code, order) pair."""
    head, _, tail = name.partition(":")
    table = {"const": B_CONST, "site": B_SITE, "cos": B_COS, "sin": B_SIN,
             "x": B_X, "y": B_Y, "z": B_Z, "zonal": B_ZONAL}
    if head not in table:
        raise ModelError(f"unknown basis function {name!r}")
    code = table[head]
    needs_order = code in (B_SITE, B_COS, B_SIN, B_ZONAL)
    if needs_order != bool(tail):
        raise ModelError(f"basis function {name!r} malformed")
    order = int(tail) if tail else 0
    if code not in _ALLOWED[domain.code]:
        raise ModelError(f"basis function {name!r} not available on {type(domain).__name__}")
    if code == B_SITE and not 0 <= order < domain.K:
        raise ModelError(f"site index in {name!r} out of range")
    if order < 0:
        raise ModelError(f"negative order in {name!r}")
    return code, order


def eval_basis(domain: Domain, code: int, order: int, loc: np.ndarray) -> np.ndarray:
    loc = np.asarray(loc, dtype=float)
    n = loc.shape[0]
    if code == B_CONST:
        return np.ones(n)
    if code == B_SITE:
        return (loc[:, 0] == order).astype(float)
    if code in (B_COS, B_SIN):
        if isinstance(domain, Circle):
            arg = 2 * np.pi * order * loc[:, 0] / domain.circumference
        else:
            arg = np.pi * order * loc[:, 0]
        return np.cos(arg) if code == B_COS else np.sin(arg)
    if code == B_X:
        return loc[:, 0].copy()
    if code == B_Y:
        return loc[:, 1].copy()
    if code == B_Z:
        return loc[:, 2].copy()
    from scipy.special import eval_legendre

    return eval_legendre(order, loc[:, 2])


def default_test_functions(domain: Domain) -> tuple[str, ...]:
    if isinstance(domain, FiniteSet):
        return tuple(f"site:{k}" for k in range(domain.K))
    if isinstance(domain, Circle):
        return ("cos:1", "sin:1", "cos:2", "sin:2")
    if isinstance(domain, Sphere):
        return ("x", "y", "z", "zonal:2")
    return ("x", "cos:1", "cos:2")


@dataclass(frozen=True)
class PositionTerm:
    """b(x, h) = sum_k basis_k(x) * poly_k(h) with a declared bound sup|b| <= bound."""

    bound: float
    terms: tuple[tuple[str, Polynomial], ...]

    def evaluate(self, domain: Domain, loc: np.ndarray, h) -> np.ndarray:
        loc = np.asarray(loc, dtype=float)
        out = np.zeros(loc.shape[0])
        for name, poly in self.terms:
            out += eval_basis(domain, *parse_basis(name, domain), loc) * poly(h)
        return out

    def at_density(self, h) -> tuple[tuple[str, float], ...]:
        """Freeze the h-dependence, giving a pure basis expansion in x."""
        return tuple((name, float(poly(h))) for name, poly in self.terms)


@dataclass(frozen=True)
class Dispersal:
    """Offspring dispersal for births of type j from type-i parents.

    ``rare``: with probability min(1, c/N) the offspring jumps to a location
    drawn from a fixed kernel (``uniform`` over E, or a site matrix on a
    FiniteSet).  ``local``: every offspring is displaced by a Gaussian step of
    scale s/sqrt(N) (continuous domains only).
    """

    kind: str
    c: float = 0.0
    s: float = 0.0
    kernel: str = "uniform"
    matrix: Optional[tuple] = None
    new_clan: bool = False

    def check(self, domain: Domain) -> None:
        if self.kind == "rare":
            if self.c < 0:
                raise ModelError("dispersal c must be nonnegative")
            if self.kernel == "matrix":
                if not isinstance(domain, FiniteSet) or self.matrix is None:
                    raise ModelError("matrix dispersal kernel needs a FiniteSet and a matrix")
                m = np.array(self.matrix, dtype=float)
                if m.shape != (domain.K, domain.K) or (m < 0).any():
                    raise ModelError("dispersal matrix must be a nonnegative KxK matrix")
                if np.abs(m.sum(axis=1) - 1).max() > 1e-12:
                    raise ModelError("dispersal matrix rows must sum to one")
            elif self.kernel != "uniform":
                raise ModelError(f"unknown dispersal kernel {self.kernel!r}")
        elif self.kind == "local":
            if isinstance(domain, FiniteSet):
                raise ModelError("local Gaussian dispersal needs a continuous domain")
            if self.s <= 0:
                raise ModelError("local dispersal scale s must be positive")
        else:
            raise ModelError(f"unknown dispersal kind {self.kind!r}")


@dataclass(frozen=True)
class ImmigrationLaw:
    """Location law of immigrants: uniform, discrete site weights, or von Mises-Fisher."""

    kind: str = "uniform"
    weights: Optional[tuple[float, ...]] = None
    mean: Optional[tuple[float, ...]] = None
    concentration: float = 0.0

    def check(self, domain: Domain) -> None:
        if self.kind == "uniform":
            return
        if self.kind == "weights":
            if not isinstance(domain, FiniteSet) or self.weights is None:
                raise ModelError("weighted immigration needs a FiniteSet and weights")
            w = np.array(self.weights, dtype=float)
            if w.shape != (domain.K,) or (w < 0).any() or w.sum() <= 0:
                raise ModelError("immigration weights must be K nonnegative numbers")
        elif self.kind == "vmf":
            if not isinstance(domain, (Circle, Sphere)):
                raise ModelError("von Mises-Fisher immigration needs a Circle or Sphere")
            if self.concentration <= 0 or self.mean is None:
                raise ModelError("von Mises-Fisher needs a mean and positive concentration")
            if isinstance(domain, Sphere):
                m = np.array(self.mean, dtype=float)
                if m.shape != (3,) or abs(np.linalg.norm(m) - 1) > 1e-12:
                    raise ModelError("von Mises-Fisher mean must be a unit 3-vector")
        else:
            raise ModelError(f"unknown immigration law {self.kind!r}")

    def sample(self, domain: Domain, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "weights":
            w = np.array(self.weights, dtype=float)
            return rng.choice(domain.K, size=n, p=w / w.sum()).astype(float)[:, None]
        if self.kind == "vmf" and isinstance(domain, Sphere):
            from scipy.stats import vonmises_fisher

            return vonmises_fisher(np.array(self.mean), self.concentration).rvs(n, random_state=rng)
        if self.kind == "vmf":
            ang = rng.vonmises(0.0, self.concentration, size=n)
            x = (self.mean[0] + ang * domain.circumference / (2 * np.pi)) % domain.circumference
            return x[:, None]
        return domain.uniform(rng, n)


@dataclass(frozen=True)
class ModelSpec:
    """Complete description of a multi-type spatial birth-death-migration model."""

    q: int
    domain: Domain
    beta: tuple[tuple[Polynomial, ...], ...]
    rho: tuple[Polynomial, ...]
    H_max: float
    b_s: tuple[tuple[Optional[PositionTerm], ...], ...] = ()
    d_s: tuple[Optional[PositionTerm], ...] = ()
    dispersal: tuple[tuple[Optional[Dispersal], ...], ...] = ()
    kappa: tuple[Polynomial, ...] = ()
    immigration: tuple[ImmigrationLaw, ...] = ()
    kappa_growth: float = 0.0
    track_clans: bool = False
    name: str = "model"

    def __post_init__(self):
        q = self.q
        none2 = tuple((None,) * q for _ in range(q))
        if not self.b_s:
            object.__setattr__(self, "b_s", none2)
        if not self.d_s:
            object.__setattr__(self, "d_s", (None,) * q)
        if not self.dispersal:
            object.__setattr__(self, "dispersal", none2)
        if not self.kappa:
            object.__setattr__(self, "kappa", tuple(Polynomial.zero(q) for _ in range(q)))
        if not self.immigration:
            object.__setattr__(self, "immigration", (ImmigrationLaw(),) * q)

    @property
    def mechanisms(self) -> frozenset[str]:
        out = set()
        if any(t is not None for row in self.b_s for t in row) or any(t is not None for t in self.d_s):
            out.add("PositionDependent")
        if any(d is not None for row in self.dispersal for d in row):
            out.add("Dispersal")
        if any(not k.is_zero() for k in self.kappa):
            out.add("Immigration")
        return frozenset(out)

    def structure_check(self) -> None:
        """Shape and domain checks that do not need the rate grid."""
        q = self.q
        if q < 1:
            raise ModelError("q must be >= 1")
        if len(self.beta) != q or any(len(r) != q for r in self.beta):
            raise ModelError("beta must be a q x q table")
        if len(self.rho) != q or len(self.kappa) != q or len(self.immigration) != q:
            raise ModelError("rho, kappa and immigration need one entry per type")
        if not self.H_max > 0:
            raise ModelError("H_max must be positive")
        for p in itertools.chain(itertools.chain.from_iterable(self.beta), self.rho, self.kappa):
            if p.q != q:
                raise ModelError("polynomial variable count differs from q")
        self.domain.check(q)
        for row in self.dispersal:
            for d in row:
                if d is not None:
                    d.check(self.domain)
        for law in self.immigration:
            law.check(self.domain)
        for term in [t for row in self.b_s for t in row] + list(self.d_s):
            if term is None:
                continue
            if not term.bound >= 0:
                raise ModelError("position-term bound must be declared and nonnegative")
            for name, _ in term.terms:
                parse_basis(name, self.domain)


# --------------------------------------------------------------------------
# populations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityVector:
    counts: tuple[int, ...]
    N: int

    @property
    def h(self) -> np.ndarray:
        return np.array(self.counts, dtype=float) / self.N


def _as_rows(loc) -> np.ndarray:
    a = np.asarray(loc, dtype=float)
    if a.size == 0:
        return a.reshape(0, a.shape[1] if a.ndim == 2 else 1)
    return a.reshape(len(a), -1)


@dataclass
class PopulationState:
    """Atomic measure: per-type particle locations (n_i x dim) and optional clan ids."""

    N: int
    locations: list[np.ndarray]
    clans: Optional[list[np.ndarray]] = None
    t: float = 0.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ModelError("N must be a positive integer")
        self.N = int(self.N)
        self.locations = [_as_rows(l) for l in self.locations]
        if self.clans is not None:
            self.clans = [np.asarray(c, dtype=float) for c in self.clans]
            if [len(c) for c in self.clans] != self.counts:
                raise ModelError("clan ids must be present on every particle")

    @property
    def q(self) -> int:
        return len(self.locations)

    @property
    def counts(self) -> list[int]:
        return [len(l) for l in self.locations]

    def check(self, domain: Domain) -> None:
        for loc in self.locations:
            check_locations(domain, loc)

    def site_counts(self, K: int) -> np.ndarray:
        out = np.zeros((self.q, K), dtype=np.int64)
        for i, loc in enumerate(self.locations):
            out[i] = np.bincount(loc[:, 0].astype(np.int64), minlength=K)
        return out

    def integrate(self, domain: Domain, name: str) -> np.ndarray:
        """<f, mu_i> for every type i."""
        code, order = parse_basis(name, domain)
        return np.array([eval_basis(domain, code, order, l).sum() / self.N for l in self.locations])

    def copy(self) -> "PopulationState":
        return PopulationState(
            self.N,
            [l.copy() for l in self.locations],
            None if self.clans is None else [c.copy() for c in self.clans],
            self.t,
        )


def density_map(pop: PopulationState) -> DensityVector:
    return DensityVector(tuple(pop.counts), pop.N)


def population_from_sites(site_counts, N: int, clans: bool = False, rng=None) -> PopulationState:
    """Build a FiniteSet population from an integer (q, K) table of particle counts."""
    site_counts = np.asarray(site_counts, dtype=np.int64)
    locs = [np.repeat(np.arange(site_counts.shape[1]), row).astype(float)[:, None] for row in site_counts]
    cl = None
    if clans:
        rng = rng or np.random.default_rng(0)
        cl = [rng.uniform(size=len(l)) for l in locs]
    return PopulationState(N, locs, cl)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    part: str  # "model" for structural checks, "(A)".."(D)" for the standing assumptions
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]
    equilibrium: object = None
    failures: tuple[Check, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "failures", tuple(c for c in self.checks if not c.passed))

    @property
    def accepted(self) -> bool:
        return not self.failures

    def render(self) -> str:
        lines = [f"status: {'ACCEPTED' if self.accepted else 'REJECTED'}"]
        for c in self.checks:
            mark = "pass" if c.passed else "FAIL"
            part = "" if c.part == "model" else f" {c.part}"
            lines.append(f"[{mark}]{part} {c.name}: {c.detail}".rstrip(": "))
        return "\n".join(lines)


def rate_grid(spec: ModelSpec, points_per_axis: Optional[int] = None) -> np.ndarray:
    """Dense sample of the clamp box [0, H_max]^q used for sign and growth checks."""
    q = spec.q
    if points_per_axis is None:
        points_per_axis = {1: 401, 2: 61, 3: 21}.get(q, max(3, int(round(20000 ** (1 / q)))))
    axis = np.linspace(0.0, spec.H_max, points_per_axis)
    return np.stack(np.meshgrid(*([axis] * q), indexing="ij"), axis=-1).reshape(-1, q)


def validate_model(spec: ModelSpec, guess=None) -> ValidationReport:
    """Structural checks plus the standing equilibrium assumptions.

    The equilibrium part delegates to :mod:`fvlimit.flow`; every check is run
    and reported, so a rejected model lists all of its problems at once.
    """
    from . import flow

    checks: list[Check] = []
    try:
        spec.structure_check()
        checks.append(Check("structure", "model", True))
    except ModelError as exc:
        checks.append(Check("structure", "model", False, str(exc)))
        return ValidationReport(tuple(checks))

    grid = rate_grid(spec)
    q = spec.q
    neg = []
    for i, j in itertools.product(range(q), range(q)):
        if spec.beta[i][j](grid).min() < 0:
            neg.append(f"beta[{i + 1}][{j + 1}]")
    for i in range(q):
        if spec.rho[i](grid).min() < 0:
            neg.append(f"rho[{i + 1}]")
        if spec.kappa[i](grid).min() < 0:
            neg.append(f"kappa[{i + 1}]")
    checks.append(Check("rates nonnegative on grid", "model", not neg,
                        ("negative: " + ", ".join(neg)) if neg else f"{len(grid)} points"))

    if "Immigration" in spec.mechanisms:
        norm1 = grid.sum(axis=1)
        worst = max(float(np.max(spec.kappa[i](grid) / (1 + norm1))) for i in range(q))
        ok = worst <= spec.kappa_growth * (1 + 1e-12)
        checks.append(Check("immigration growth bound", "model", ok,
                            f"max kappa/(1+|h|) = {worst:.6g}, declared C = {spec.kappa_growth:g}"))

    pos_terms = [(f"b_s[{i + 1}][{j + 1}]", spec.b_s[i][j]) for i in range(q) for j in range(q)]
    pos_terms += [(f"d_s[{i + 1}]", spec.d_s[i]) for i in range(q)]
    pos_terms = [(n, t) for n, t in pos_terms if t is not None]
    if pos_terms:
        xs = spec.domain.grid()
        hs = rate_grid(spec, 7 if q <= 3 else 3)
        bad = []
        for name, term in pos_terms:
            vals = np.array([term.evaluate(spec.domain, xs, h) for h in hs])
            if vals.min() < -1e-12 or vals.max() > term.bound * (1 + 1e-12):
                bad.append(f"{name} range [{vals.min():.4g}, {vals.max():.4g}] vs bound {term.bound:g}")
        checks.append(Check("position terms within declared bounds", "model", not bad, "; ".join(bad)))

    eq_checks, eq = flow.assumption_checks(spec, guess)
    checks.extend(eq_checks)
    checks.append(Check("analytic at h_eq", "(D)", True, "polynomial rates"))
    return ValidationReport(tuple(checks), eq if all(c.passed for c in eq_checks) else None)
