"""Python-side driver of the event loop: packing, initial states, observation and records."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..model import (
    Circle,
    FiniteSet,
    ModelError,
    ModelSpec,
    PopulationState,
    Sphere,
    default_test_functions,
    eval_basis,
    parse_basis,
)
from . import kernel
from .rng import stream_state

STATUS_NAMES = {kernel.REACHED: "ok", kernel.EXTINCT: "extinct", kernel.EXPLODED: "exploded"}
COUNTER_NAMES = ("local_births", "dispersed_births", "deaths", "immigrations", "migrations", "rejected",
                 "iterations")


def pack(spec: ModelSpec, N: int) -> kernel.Params:
    """Flatten a spec into the array bundle the kernel reads."""
    q = spec.q
    dom = spec.domain
    polys = []

    def pid(p):
        polys.append(p)
        return len(polys) - 1

    beta_id = np.array([[pid(spec.beta[i][j]) for j in range(q)] for i in range(q)], dtype=np.int64)
    rho_id = np.array([pid(spec.rho[i]) for i in range(q)], dtype=np.int64)
    kappa_id = np.array([pid(spec.kappa[i]) for i in range(q)], dtype=np.int64)

    slots = [spec.b_s[i][j] for i in range(q) for j in range(q)] + list(spec.d_s)
    pos_start = [0]
    pos_code, pos_order, pos_poly = [], [], []
    for term in slots:
        if term is not None:
            for name, poly in term.terms:
                c, o = parse_basis(name, dom)
                pos_code.append(c)
                pos_order.append(o)
                pos_poly.append(pid(poly))
        pos_start.append(len(pos_code))
    bs_bound = np.array([[0.0 if spec.b_s[i][j] is None else spec.b_s[i][j].bound for j in range(q)]
                         for i in range(q)])
    ds_bound = np.array([0.0 if t is None else t.bound for t in spec.d_s])

    starts = [0]
    exps, coefs = [], []
    for p in polys:
        for e, c in p.terms.items():
            exps.append(e)
            coefs.append(c)
        starts.append(len(coefs))
    poly_exp = np.array(exps, dtype=np.int64).reshape(-1, q)
    max_deg = int(poly_exp.max()) if poly_exp.size else 0

    K = dom.K if isinstance(dom, FiniteSet) else 1
    disp_kind = np.zeros((q, q), dtype=np.int64)
    disp_c = np.zeros((q, q))
    disp_s = np.zeros((q, q))
    disp_kernel = np.zeros((q, q), dtype=np.int64)
    disp_cum = np.zeros((q, q, K, K))
    disp_newclan = np.zeros((q, q), dtype=np.int64)
    for i in range(q):
        for j in range(q):
            d = spec.dispersal[i][j]
            if d is None:
                continue
            disp_kind[i, j] = 1 if d.kind == "rare" else 2
            disp_c[i, j] = d.c
            disp_s[i, j] = d.s
            disp_newclan[i, j] = int(d.new_clan)
            if d.kernel == "matrix":
                disp_kernel[i, j] = 1
                disp_cum[i, j] = np.cumsum(np.array(d.matrix, dtype=float), axis=1)

    imm_law = np.zeros(q, dtype=np.int64)
    imm_cum = np.zeros((q, K))
    imm_mean = np.zeros((q, 3))
    imm_conc = np.zeros(q)
    for i, law in enumerate(spec.immigration):
        if law.kind == "weights":
            imm_law[i] = 1
            imm_cum[i] = np.cumsum(np.array(law.weights, dtype=float))
        elif law.kind == "vmf":
            imm_law[i] = 2
            imm_mean[i, : len(law.mean)] = law.mean
            imm_conc[i] = law.concentration

    mig_out = np.zeros((q, K))
    mig_max = np.zeros(q)
    mig_cum = np.zeros((q, K, K))
    diff = np.zeros(q)
    if isinstance(dom, FiniteSet):
        for i in range(q):
            m = dom.matrix(i).copy()
            np.fill_diagonal(m, 0.0)
            mig_out[i] = m.sum(axis=1)
            mig_max[i] = mig_out[i].max()
            mig_cum[i] = np.cumsum(m, axis=1)
    else:
        diff[:] = dom.diffusion
    L = dom.circumference if isinstance(dom, Circle) else dom.radius if isinstance(dom, Sphere) else 1.0

    if q == 1:
        h = np.arange(int(math.floor(spec.H_max * N)) + 3) / N
        rate_table = np.column_stack([
            N * np.maximum(spec.beta[0][0](h[:, None]), 0.0),
            N * np.maximum(spec.rho[0](h[:, None]), 0.0),
            N * np.maximum(spec.kappa[0](h[:, None]), 0.0),
        ])
    else:
        rate_table = np.zeros((0, 3))

    return kernel.Params(
        N=int(N), q=int(q), K=int(K), dom=int(dom.code), L=float(L), H_max=float(spec.H_max),
        track_clans=int(spec.track_clans),
        poly_exp=poly_exp, poly_coef=np.array(coefs, dtype=float), poly_start=np.array(starts, dtype=np.int64),
        max_deg=max_deg,
        beta_id=beta_id, rho_id=rho_id, kappa_id=kappa_id,
        bs_bound=bs_bound, ds_bound=ds_bound, pos_start=np.array(pos_start, dtype=np.int64),
        pos_code=np.array(pos_code, dtype=np.int64), pos_order=np.array(pos_order, dtype=np.int64),
        pos_poly=np.array(pos_poly, dtype=np.int64),
        disp_kind=disp_kind, disp_c=disp_c, disp_s=disp_s, disp_kernel=disp_kernel, disp_cum=disp_cum,
        disp_newclan=disp_newclan,
        imm_law=imm_law, imm_cum=imm_cum, imm_mean=imm_mean, imm_conc=imm_conc,
        mig_out=mig_out, mig_max=mig_max, mig_cum=mig_cum, diff=diff, rate_table=rate_table,
    )


# --------------------------------------------------------------------------
# initial laws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialLaw:
    """Initial population: densities per type and a location law per type.

    ``site_weights`` (FiniteSet) are allocated deterministically by largest
    remainder so that, e.g., weights (0.3, 0.7) with 800 particles give exactly
    240 and 560.  Continuous domains draw uniform locations.
    """

    h: tuple[float, ...]
    site_weights: Optional[tuple[tuple[float, ...], ...]] = None
    clans: str = "distinct"

    def sample(self, spec: ModelSpec, N: int, rng: np.random.Generator) -> PopulationState:
        if len(self.h) != spec.q:
            raise ModelError("initial density needs one entry per type")
        counts = [int(round(hi * N)) for hi in self.h]
        dom = spec.domain
        locs = []
        for i, n in enumerate(counts):
            if isinstance(dom, FiniteSet):
                w = np.full(dom.K, 1.0 / dom.K) if self.site_weights is None else np.array(self.site_weights[i], float)
                w = w / w.sum()
                alloc = np.floor(w * n).astype(np.int64)
                rem = n - alloc.sum()
                order = np.argsort(-(w * n - alloc), kind="stable")
                alloc[order[:rem]] += 1
                locs.append(np.repeat(np.arange(dom.K), alloc).astype(float)[:, None])
            else:
                locs.append(dom.uniform(rng, n))
        clans = None
        if spec.track_clans:
            if self.clans == "single":
                clans = [np.full(n, 0.5) for n in counts]
            else:
                clans = [rng.uniform(size=n) for n in counts]
        return PopulationState(N, locs, clans)


# --------------------------------------------------------------------------
# simulator object
# --------------------------------------------------------------------------


class Simulator:
    """One replicate: owns the state arrays and its RNG stream."""

    def __init__(self, spec: ModelSpec, pop: PopulationState, seed: int, replicate: int = 0,
                 trace_capacity: int = 0, params: Optional[kernel.Params] = None):
        pop.check(spec.domain)
        if pop.q != spec.q:
            raise ModelError("population type count differs from spec")
        self.spec = spec
        self.N = pop.N
        self.P = params if params is not None else pack(spec, pop.N)
        q = spec.q
        cap = int(math.floor(spec.H_max * pop.N)) + 2
        if max(pop.counts, default=0) > cap - 2 or sum(pop.counts) > spec.H_max * pop.N:
            raise ModelError("initial population exceeds H_max")
        self.pos = np.zeros((q, cap, 3))
        self.clan = np.zeros((q, cap))
        self.tlast = np.full((q, cap), pop.t)
        self.count = np.array(pop.counts, dtype=np.int64)
        dim = spec.domain.dim
        for i in range(q):
            self.pos[i, : self.count[i], :dim] = pop.locations[i]
            if pop.clans is not None:
                self.clan[i, : self.count[i]] = pop.clans[i]
        self.sites = np.zeros((q, self.P.K), dtype=np.int64)
        if isinstance(spec.domain, FiniteSet):
            self.sites[:] = pop.site_counts(self.P.K)
        self.counters = np.zeros(kernel.N_COUNTERS, dtype=np.int64)
        self.rng = stream_state(seed, replicate, 0)
        self.trace_t = np.zeros(trace_capacity)
        self.trace_v = np.zeros((trace_capacity, 5), dtype=np.int32)
        self.ntrace = np.zeros(1, dtype=np.int64)
        self.t = float(pop.t)
        self.status = kernel.REACHED
        self.status_time: Optional[float] = None

    @property
    def h(self) -> np.ndarray:
        return self.count / self.N

    def advance_to(self, t_end: float) -> str:
        """Run the event loop up to t_end (no-op once extinct or exploded)."""
        if self.status == kernel.EXPLODED:
            return "exploded"
        if self.status == kernel.EXTINCT:
            self.t = max(self.t, t_end)
            return "extinct"
        if t_end <= self.t:
            return "ok"
        status, t = kernel.advance(self.P, self.pos, self.clan, self.tlast, self.count, self.sites,
                                   self.counters, self.rng, self.t, t_end, self.trace_t, self.trace_v,
                                   self.ntrace)
        if status != kernel.REACHED:
            self.status = status
            self.status_time = t
            self.t = t if status == kernel.EXPLODED else max(t, t_end)
        else:
            self.t = t_end
        return STATUS_NAMES[status]

    def sync(self) -> None:
        kernel.sync_all(self.P, self.pos, self.tlast, self.count, self.t, self.rng)

    def locations(self, i: int) -> np.ndarray:
        return self.pos[i, : self.count[i], : self.spec.domain.dim]

    def observe(self, name: str) -> np.ndarray:
        """<f, mu_i> for every type, positions synchronised to the current time."""
        self.sync()
        code, order = parse_basis(name, self.spec.domain)
        return np.array([eval_basis(self.spec.domain, code, order, self.locations(i)).sum() / self.N
                         for i in range(self.spec.q)])

    def population(self) -> PopulationState:
        self.sync()
        q = self.spec.q
        clans = [self.clan[i, : self.count[i]].copy() for i in range(q)] if self.spec.track_clans else None
        return PopulationState(self.N, [self.locations(i).copy() for i in range(q)], clans, self.t)

    def counter_dict(self) -> dict:
        return {n: int(v) for n, v in zip(COUNTER_NAMES, self.counters)}

    def trace(self) -> tuple[np.ndarray, np.ndarray]:
        n = min(int(self.ntrace[0]), len(self.trace_t))
        return self.trace_t[:n].copy(), self.trace_v[:n].copy()


# --------------------------------------------------------------------------
# configuration and records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    N: int
    T_end: float
    seed: int = 0
    t_N: Optional[float] = None
    record_points: int = 101
    record_grid: Optional[tuple[float, ...]] = None
    observers: Optional[tuple[str, ...]] = None
    initial: Optional[InitialLaw] = None
    clan_sizes: bool = False
    trace_capacity: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ModelError("N must be positive")
        if self.t_N is not None and self.t_N <= 0:
            raise ModelError("t_N must be positive")

    @property
    def warmup(self) -> float:
        return self.N ** -0.5 if self.t_N is None else self.t_N

    def grid(self) -> np.ndarray:
        if self.record_grid is not None:
            g = np.asarray(self.record_grid, dtype=float)
            if (np.diff(g) <= 0).any() or g[0] < 0:
                raise ModelError("record grid must be increasing and nonnegative")
            return g
        shifted = self.warmup + np.linspace(0.0, self.T_end, self.record_points)
        return np.concatenate([[0.0], shifted])


@dataclass
class TrajectoryRecord:
    N: int
    q: int
    times: np.ndarray
    counts: np.ndarray  # (G, q) integers
    observables: dict  # name -> (G, q) array of <f, mu_i>
    counters: dict
    status: str
    status_time: Optional[float]
    t_N: float
    T_end: float
    clan_sizes: Optional[list] = None

    @property
    def h(self) -> np.ndarray:
        return self.counts / self.N

    def shifted_window(self) -> np.ndarray:
        """Boolean mask of grid times inside [t_N, T_end + t_N]."""
        eps = 1e-12 * max(1.0, self.T_end)
        return (self.times >= self.t_N - eps) & (self.times <= self.t_N + self.T_end + eps)


def default_initial(spec: ModelSpec) -> InitialLaw:
    from ..flow import find_equilibrium

    return InitialLaw(tuple(find_equilibrium(spec).h_eq.tolist()))


def simulate(spec: ModelSpec, cfg: SimConfig, pop0: Optional[PopulationState] = None,
             replicate: int = 0) -> tuple[TrajectoryRecord, PopulationState]:
    """One replicate of the particle system observed on the record grid."""
    if pop0 is None:
        law = cfg.initial or default_initial(spec)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(replicate, 1)))
        pop0 = law.sample(spec, cfg.N, rng)
    elif pop0.N != cfg.N:
        raise ModelError("initial population has a different N than the config")
    names = tuple(cfg.observers) if cfg.observers is not None else default_test_functions(spec.domain)
    sim = Simulator(spec, pop0, cfg.seed, replicate, cfg.trace_capacity)
    grid = cfg.grid()
    G = len(grid)
    counts = np.zeros((G, spec.q), dtype=np.int64)
    obs = {n: np.zeros((G, spec.q)) for n in names}
    clan_sizes = [] if cfg.clan_sizes else None
    last = G
    for g, t in enumerate(grid):
        status = sim.advance_to(t)
        if status == "exploded":
            last = g
            break
        counts[g] = sim.count
        for n in names:
            obs[n][g] = sim.observe(n)
        if clan_sizes is not None:
            clan_sizes.append(clan_weights_from_arrays(sim.clan, sim.count))
    record = TrajectoryRecord(
        N=cfg.N, q=spec.q, times=grid[:last], counts=counts[:last],
        observables={n: v[:last] for n, v in obs.items()}, counters=sim.counter_dict(),
        status=STATUS_NAMES[sim.status], status_time=sim.status_time, t_N=cfg.warmup, T_end=cfg.T_end,
        clan_sizes=clan_sizes,
    )
    return record, sim.population()


def clan_weights_from_arrays(clan: np.ndarray, count: np.ndarray) -> np.ndarray:
    ids = np.concatenate([clan[i, : count[i]] for i in range(len(count))])
    if ids.size == 0:
        return np.zeros(0)
    _, sizes = np.unique(ids, return_counts=True)
    return np.sort(sizes)[::-1] / ids.size


def simulate_replicates(spec: ModelSpec, cfg: SimConfig, replicates: int, workers: int = 1,
                        pop0: Optional[PopulationState] = None) -> list[TrajectoryRecord]:
    """Independent replicates; results are returned in replicate order whatever the worker count."""
    idx = list(range(replicates))
    if workers <= 1:
        return [simulate(spec, cfg, pop0, r)[0] for r in idx]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_replicate_worker, [(spec, cfg, pop0, r) for r in idx]))


def _replicate_worker(args):
    spec, cfg, pop0, r = args
    return simulate(spec, cfg, pop0, r)[0]
