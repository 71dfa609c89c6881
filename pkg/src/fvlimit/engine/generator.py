"""Exact generator of the particle system on finite site sets, and a Monte-Carlo check against it.

On a FiniteSet the state is the integer matrix ``n[i, x]`` of type-i
particles at site x, so the generator acts on a test function by a finite
sum over transitions.  The transition list mirrors the event loop: fast
births (optionally dispersed), position-dependent births and deaths,
immigration and migration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from ..model import FiniteSet, ModelError, ModelSpec, PopulationState, default_test_functions, eval_basis, parse_basis
from . import kernel
from .rng import stream_state
from .simulate import Simulator

Coefficient = Union[Sequence[float], Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class TestFunction:
    """F(mu) = prod_l sum_i c_{l,i}(h) <f_l, mu_i>.

    Each factor is a site table ``f`` (length K) with per-type coefficients
    that are constants or a function of the density vector.
    """

    factors: tuple[tuple[np.ndarray, Coefficient], ...]
    name: str = "F"

    __test__ = False  # keep pytest from collecting this class

    def _coef(self, c: Coefficient, h: np.ndarray) -> np.ndarray:
        if callable(c):
            return np.asarray(c(h), dtype=float)
        return np.broadcast_to(np.asarray(c, dtype=float), h.shape)

    def __call__(self, counts: np.ndarray, N: int) -> np.ndarray:
        """Evaluate on one (q, K) count matrix or a batch (..., q, K)."""
        counts = np.asarray(counts, dtype=float)
        h = counts.sum(axis=-1) / N
        out = np.ones(counts.shape[:-2])
        for f, c in self.factors:
            integrals = counts @ np.asarray(f, dtype=float) / N
            out = out * (self._coef(c, h) * integrals).sum(axis=-1)
        return out


def linear(f, i: int, q: int, name: str = "") -> TestFunction:
    c = np.zeros(q)
    c[i] = 1.0
    return TestFunction(((np.asarray(f, dtype=float), c),), name or f"<f,mu_{i + 1}>")


def shipped_test_functions(spec: ModelSpec) -> list[TestFunction]:
    """Linear functionals for each default basis function and type, plus one product."""
    dom = spec.domain
    if not isinstance(dom, FiniteSet):
        raise ModelError("generator evaluation needs a FiniteSet domain")
    sites = np.arange(dom.K, dtype=float)[:, None]
    tables = {n: eval_basis(dom, *parse_basis(n, dom), sites) for n in default_test_functions(dom)}
    q = spec.q
    out = [TestFunction(((np.ones(dom.K), np.eye(q)[i]),), f"h_{i + 1}") for i in range(q)]
    for name, f in tables.items():
        for i in range(q):
            out.append(linear(f, i, q, f"<{name},mu_{i + 1}>"))
    first = next(iter(tables.values()))
    out.append(TestFunction(((first, np.eye(q)[0]), (np.ones(dom.K), np.eye(q)[q - 1])),
                            f"<{next(iter(tables))},mu_1>*h_{q}"))
    return out


def transitions(spec: ModelSpec, counts: np.ndarray, N: int) -> list[tuple[float, tuple]]:
    """All (rate, moves) pairs from a count matrix; ``moves`` lists (type, site, +-1)."""
    dom = spec.domain
    if not isinstance(dom, FiniteSet):
        raise ModelError("generator evaluation needs a FiniteSet domain")
    q, K = spec.q, dom.K
    counts = np.asarray(counts, dtype=np.int64)
    h = counts.sum(axis=1) / N
    sites = np.arange(K, dtype=float)[:, None]
    out = []
    for i in range(q):
        for j in range(q):
            fast = N * max(float(spec.beta[i][j](h)), 0.0)
            d = spec.dispersal[i][j]
            p = min(1.0, d.c / N) if d is not None and d.kind == "rare" else 0.0
            if d is not None and p > 0:
                kern = (np.array(d.matrix, dtype=float) if d.kernel == "matrix" else np.full((K, K), 1.0 / K))
            slow = (spec.b_s[i][j].evaluate(dom, sites, h) if spec.b_s[i][j] is not None else np.zeros(K))
            for x in range(K):
                n = counts[i, x]
                if n == 0:
                    continue
                r_local = n * (fast * (1.0 - p) + slow[x])
                if r_local > 0:
                    out.append((r_local, ((j, x, 1),)))
                if p > 0:
                    for y in range(K):
                        r = n * fast * p * kern[x, y]
                        if r > 0:
                            out.append((r, ((j, y, 1),)))
        death_slow = (spec.d_s[i].evaluate(dom, sites, h) if spec.d_s[i] is not None else np.zeros(K))
        rho = N * max(float(spec.rho[i](h)), 0.0)
        for x in range(K):
            r = counts[i, x] * (rho + death_slow[x])
            if r > 0:
                out.append((r, ((i, x, -1),)))
        kappa = N * max(float(spec.kappa[i](h)), 0.0)
        if kappa > 0:
            law = spec.immigration[i]
            w = np.array(law.weights, dtype=float) if law.kind == "weights" else np.ones(K)
            w = w / w.sum()
            for y in range(K):
                if w[y] > 0:
                    out.append((kappa * w[y], ((i, y, 1),)))
        m = dom.matrix(i)
        for x in range(K):
            for y in range(K):
                if x != y and m[x, y] > 0 and counts[i, x] > 0:
                    out.append((counts[i, x] * m[x, y], ((i, x, -1), (i, y, 1))))
    return out


def generator_apply(spec: ModelSpec, F: TestFunction, pop: PopulationState) -> float:
    """(A^N F)(mu) as an exact finite sum over the transitions out of ``pop``."""
    if not isinstance(spec.domain, FiniteSet):
        raise ModelError("generator evaluation needs a FiniteSet domain")
    counts = pop.site_counts(spec.domain.K)
    N = pop.N
    base = float(F(counts, N))
    total = 0.0
    for rate, moves in transitions(spec, counts, N):
        nxt = counts.copy()
        for i, x, d in moves:
            nxt[i, x] += d
        total += rate * (float(F(nxt, N)) - base)
    return total


@dataclass(frozen=True)
class ConsistencyResult:
    name: str
    z: float
    estimate: float
    exact: float
    stderr: float
    replicates: int


def final_site_counts(spec: ModelSpec, pop0: PopulationState, delta: float, replicates: int,
                      seed: int) -> np.ndarray:
    """Site counts after time ``delta`` for independent replicates started at ``pop0``."""
    sim = Simulator(spec, pop0, seed)
    seeds = np.stack([stream_state(seed, r, 2) for r in range(replicates)])
    return kernel.run_site_batch(sim.P, sim.pos, sim.clan, sim.count, sim.sites, seeds, float(delta))


def generator_consistency_test(spec: ModelSpec, F: TestFunction, pop0: PopulationState, delta: float,
                               replicates: int, seed: int, finals: np.ndarray | None = None
                               ) -> ConsistencyResult:
    """z-score of the Monte-Carlo difference quotient against the exact generator value.

    ``finals`` may carry precomputed site counts so several test functions share one batch.
    """
    if finals is None:
        finals = final_site_counts(spec, pop0, delta, replicates, seed)
    N = pop0.N
    counts0 = pop0.site_counts(spec.domain.K)
    diffs = (F(finals, N) - float(F(counts0, N))) / delta
    est = float(diffs.mean())
    se = float(diffs.std(ddof=1) / np.sqrt(len(diffs))) if len(diffs) > 1 else 0.0
    exact = generator_apply(spec, F, pop0)
    if se == 0.0:
        z = 0.0 if est == exact else float("inf")
    else:
        z = (est - exact) / se
    return ConsistencyResult(F.name, z, est, exact, se, len(diffs))


__all__ = [
    "ConsistencyResult", "TestFunction", "final_site_counts", "generator_apply",
    "generator_consistency_test", "linear", "shipped_test_functions", "transitions",
]
