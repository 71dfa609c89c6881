"""End-to-end pipelines: N-scaling diagnostics and the two shipped applications.

Each pipeline returns a :class:`Report` holding named checks, delimited
tables and figures; the CLI persists these into a run directory.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import plotting, stats
from .config import build_spec, section
from .engine.simulate import InitialLaw, SimConfig, Simulator, clan_weights_from_arrays, simulate
from .flow import averaged_coefficients, find_equilibrium
from .model import FiniteSet, ModelError, default_test_functions
from .reference import PDParams, WFParams, moran_absorption, sample_poisson_dirichlet, simulate_wf


@dataclass
class Check:
    name: str
    value: float
    target: str
    passed: bool
    informational: bool = False  # reported but never decides the exit code

    def row(self) -> list:
        return [self.name, self.value, self.target, "pass" if self.passed else "FAIL",
                "info" if self.informational else "gate"]


@dataclass
class Report:
    name: str
    checks: list[Check] = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)
    figures: dict = field(default_factory=dict)  # file name -> matplotlib figure
    metrics: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)  # file name -> PopulationState

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.informational)

    def check(self, name, value, target, passed, informational=False) -> Check:
        c = Check(name, float(value), target, bool(passed), informational)
        self.checks.append(c)
        return c

    def render(self) -> str:
        w = max((len(c.name) for c in self.checks), default=10)
        lines = [f"{self.name}: {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            tag = "info" if c.informational else ("pass" if c.passed else "FAIL")
            lines.append(f"  [{tag:4}] {c.name:<{w}}  {c.value:.6g}  (target {c.target})")
        return "\n".join(lines)


Progress = Optional[Callable[[str], None]]


def _say(progress: Progress, msg: str) -> None:
    if progress is not None:
        progress(msg)


def _initial_from(raw: dict) -> Optional[InitialLaw]:
    init = section(raw, "simulation").get("initial")
    if init is None:
        return None
    sw = init.get("site_weights")
    return InitialLaw(tuple(float(x) for x in init["h"]),
                      None if sw is None else tuple(tuple(float(x) for x in row) for row in sw),
                      init.get("clans", "distinct"))


def clan_relaxation_time(eq, avg) -> float:
    """max of the density relaxation time and the mean waiting time for a fresh clan label."""
    tau = eq.relaxation_time
    if avg.new_clan_rate > 0:
        tau = max(tau, 1.0 / avg.new_clan_rate)
    return float(tau)


# ---------------------------------------------------------------------------
# N-scaling of the density and fusion diagnostics
# ---------------------------------------------------------------------------


def scaling_study(raw: dict, Ns: Sequence[int] = (100, 400, 1600), replicates: int = 50, T: float = 1.0,
                  seed: Optional[int] = None, record_points: int = 101, max_deviation: Optional[float] = None,
                  max_inseparability: Optional[float] = None, progress: Progress = None) -> Report:
    spec = build_spec(raw)
    sim_s = section(raw, "simulation")
    seed = int(sim_s.get("seed", 0)) if seed is None else seed
    eq = find_equilibrium(spec)
    names = default_test_functions(spec.domain)
    init = _initial_from(raw)
    rep = Report(f"scaling[{spec.name}]")
    dev_med, ins_med = [], {n: [] for n in names}
    ysup_med = {n: [] for n in names}
    rows = []
    records_by_N = {}
    for N in Ns:
        _say(progress, f"N={N}: {replicates} replicates")
        cfg = SimConfig(N=int(N), T_end=T, seed=seed, record_points=record_points, observers=names, initial=init)
        recs = [simulate(spec, cfg, replicate=r)[0] for r in range(replicates)]
        records_by_N[N] = recs
        dev = np.array([stats.density_deviation(rec, eq.h_eq) for rec in recs])
        dev_med.append(float(np.median(dev)))
        for r, rec in enumerate(recs):
            row = [N, r, dev[r]]
            for n in names:
                row.append(stats.inseparability(rec, n))
                row.append(float(np.abs(stats.yn_paths(rec, n)[rec.shifted_window()]).max()))
            rows.append(row)
        for k, n in enumerate(names):
            ins_med[n].append(float(np.median([row[3 + 2 * k] for row in rows if row[0] == N])))
            ysup_med[n].append(float(np.median([row[4 + 2 * k] for row in rows if row[0] == N])))
    header = ["N", "replicate", "density_deviation"]
    for n in names:
        header += [f"inseparability[{n}]", f"sup_Y[{n}]"]
    rep.tables["scaling.csv"] = (header, rows)
    rep.tables["scaling_medians.csv"] = (
        ["N", "density_deviation"] + [f"inseparability[{n}]" for n in names] + [f"sup_Y[{n}]" for n in names],
        [[N, dev_med[a]] + [ins_med[n][a] for n in names] + [ysup_med[n][a] for n in names]
         for a, N in enumerate(Ns)],
    )
    rep.check("density deviation medians strictly decreasing", dev_med[-1], "decreasing in N",
              stats.strictly_decreasing(dev_med))
    if max_deviation is not None:
        rep.check(f"median density deviation at N={Ns[-1]}", dev_med[-1], f"< {max_deviation}",
                  dev_med[-1] < max_deviation)
    if spec.q > 1:
        for n in names:
            rep.check(f"inseparability[{n}] medians strictly decreasing", ins_med[n][-1], "decreasing in N",
                      stats.strictly_decreasing(ins_med[n]))
            if max_inseparability is not None:
                rep.check(f"median inseparability[{n}] at N={Ns[-1]}", ins_med[n][-1],
                          f"< {max_inseparability}", ins_med[n][-1] < max_inseparability)
            rep.check(f"sup|Y[{n}]| medians strictly decreasing", ysup_med[n][-1], "decreasing in N",
                      stats.strictly_decreasing(ysup_med[n]), informational=True)
    rep.metrics.update(h_eq=eq.h_eq, Ns=list(Ns), density_deviation_medians=dev_med,
                       inseparability_medians=ins_med, sup_Y_medians=ysup_med)
    series = {"density deviation": dev_med}
    series.update({f"inseparability {n}": v for n, v in ins_med.items()} if spec.q > 1 else {})
    rep.figures["scaling.png"] = plotting.scaling(list(Ns), series, spec.name)
    rep.figures["density_paths.png"] = plotting.density_paths(records_by_N[Ns[-1]][:10], eq.h_eq,
                                                              f"N={Ns[-1]}")
    return rep


# ---------------------------------------------------------------------------
# population genetics
# ---------------------------------------------------------------------------


def with_infinite_alleles(raw: dict, c: float = 1.0) -> dict:
    """Copy of a q=1 config with rare uniform dispersal that always starts a fresh clan."""
    out = copy.deepcopy(raw)
    out["dispersal"] = [{"i": 1, "j": 1, "kind": "rare", "c": c, "kernel": "uniform", "new_clan": True}]
    out.setdefault("clans", {})["track"] = True
    return out


def run_fixation(spec, pop0, seed: int, replicates: int, check_every: float, max_time: float,
                 first_replicate: int = 0, progress: Progress = None):
    """Per replicate: 1 if the site-0 trait fixes, 0 if it is lost, -1 if undecided by max_time."""
    outcome = np.full(replicates, -1, dtype=np.int64)
    when = np.full(replicates, np.nan)
    for r in range(replicates):
        if progress is not None and r % 100 == 0:
            progress(f"fixation replicate {r}/{replicates}")
        sim = Simulator(spec, pop0, seed, first_replicate + r)
        t = 0.0
        while t < max_time:
            t = min(max_time, t + check_every)
            status = sim.advance_to(t)
            s = sim.sites[0]
            if s[0] == 0 and s[1] == 0 or status != "ok":
                break
            if s[1] == 0:
                outcome[r], when[r] = 1, t
                break
            if s[0] == 0:
                outcome[r], when[r] = 0, t
                break
    return outcome, when


def genetics_demo(raw: dict, seed: Optional[int] = None, progress: Progress = None) -> Report:
    spec = build_spec(raw)
    if spec.q != 1 or not isinstance(spec.domain, FiniteSet) or spec.domain.K != 2:
        raise ModelError("the genetics demo expects one type on two sites (traits)")
    sim_s, demo = section(raw, "simulation"), section(raw, "demo")
    seed = int(sim_s.get("seed", 0)) if seed is None else seed
    N = int(sim_s["N"])
    eq = find_equilibrium(spec)
    avg = averaged_coefficients(spec, eq)
    rep = Report("genetics")

    # fixation of the trait that starts at 30% of the mass
    init = _initial_from(raw) or InitialLaw(tuple(eq.h_eq))
    pop0 = init.sample(spec, N, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, 1))))
    n0 = pop0.site_counts(2)[0]
    M, k = int(n0.sum()), int(n0[0])
    R = int(demo.get("fixation_replicates", 1000))
    outcome, when = run_fixation(spec, pop0, seed, R, float(demo.get("fixation_check_every", 0.05)),
                                 float(demo.get("fixation_max_time", 60.0)), progress=progress)
    decided = outcome >= 0
    est = stats.fixation_estimate(outcome[decided] == 1)
    exact = moran_absorption(M, 1.0, k)
    rep.tables["fixation.csv"] = (["replicate", "outcome", "time"],
                                  [[r, int(outcome[r]), when[r]] for r in range(R)])
    rep.check("fixation frequency", est.estimate, f"{exact:.4g} +- 0.04", abs(est.estimate - exact) <= 0.04)
    rep.check("undecided fixation replicates", int((~decided).sum()), "0", not (~decided).any(),
              informational=True)
    wf = WFParams.from_averaged(avg)
    _say(progress, "Wright-Fisher reference paths")
    paths = simulate_wf(wf, np.array([k, M - k]) / M, T=float(demo.get("wf_horizon", 5.0)),
                        dt=float(demo.get("wf_dt", 1e-4)), seed=seed, n_paths=R,
                        record_times=np.linspace(0.0, float(demo.get("wf_horizon", 5.0)), 51))
    wf_fix = float((paths.x[-1, :, 0] > 1 - 1e-12).mean())
    rep.check("Wright-Fisher absorption frequency", wf_fix, f"{exact:.4g} +- 0.04", abs(wf_fix - exact) <= 0.04,
              informational=True)
    rep.metrics.update(h_eq=eq.h_eq, gamma_smpl=eq.gamma_smpl, fixation=est.__dict__, moran_exact=exact,
                       wf_absorption=wf_fix, M=M, k=k,
                       mean_fixation_time=float(np.nanmean(when)) if decided.any() else float("nan"))

    # clan structure under infinite-alleles mutation
    c = float(demo.get("mutation_c", 1.0))
    spec_m = build_spec(with_infinite_alleles(raw, c))
    eq_m = find_equilibrium(spec_m)
    avg_m = averaged_coefficients(spec_m, eq_m)
    h = float(eq_m.h_eq[0])
    beta = float(spec_m.beta[0][0](eq_m.h_eq))
    rho = float(spec_m.rho[0](eq_m.h_eq)) / h  # logistic coefficient in rho(h) = rho * h
    alpha_stated = beta / (2.0 * rho)
    alpha_coalescent = avg_m.new_clan_rate / avg_m.gamma_smpl
    largest, dens = stationary_clan_samples(spec_m, eq_m, avg_m, N, seed, demo, first_replicate=R,
                                            progress=progress)
    n_pd = int(demo.get("pd_samples", 500))
    pd_stated = sample_poisson_dirichlet(PDParams(alpha_stated), seed, n_pd)[:, 0]
    pd_coal = sample_poisson_dirichlet(PDParams(alpha_coalescent), seed + 1, n_pd)[:, 0]
    ks = stats.compare_samples(largest, pd_stated)
    ks_c = stats.compare_samples(largest, pd_coal)
    rep.check(f"largest clan share vs PD({alpha_stated:g}) KS p-value", ks.pvalue, "> 0.01", ks.pvalue > 0.01)
    rep.check(f"largest clan share vs PD({alpha_coalescent:g}) KS p-value", ks_c.pvalue, "> 0.01",
              ks_c.pvalue > 0.01, informational=True)
    rep.tables["clan_samples.csv"] = (["sample", "largest_share", "h"],
                                      [[s, largest[s], dens[s]] for s in range(len(largest))])
    rep.tables["pd_reference.csv"] = (["sample", f"pd_{alpha_stated:g}", f"pd_{alpha_coalescent:g}"],
                                      [[s, pd_stated[s], pd_coal[s]] for s in range(n_pd)])
    rep.metrics.update(alpha_stated=alpha_stated, alpha_coalescent=alpha_coalescent, ks_stated=ks.__dict__,
                       ks_coalescent=ks_c.__dict__, mean_largest_share=float(np.mean(largest)),
                       clan_relaxation_time=clan_relaxation_time(eq_m, avg_m))
    rep.figures["largest_share_ecdf.png"] = plotting.ecdf_compare(
        {"particle system": largest, f"PD({alpha_stated:g})": pd_stated, f"PD({alpha_coalescent:g})": pd_coal},
        "largest clan share", f"N={N}")
    rep.figures["wf_paths.png"] = plotting.wf_paths(paths.times, paths.x)
    return rep


def stationary_clan_samples(spec, eq, avg, N: int, seed: int, demo: dict, first_replicate: int = 0,
                            progress: Progress = None, observe: Optional[Callable] = None):
    """Largest clan share and density at equally spaced times after burn-in, over independent chains.

    ``observe(sim)`` is called at every sample time when given.
    """
    tau = clan_relaxation_time(eq, avg)
    burn = float(demo.get("burn_in_factor", 5.0)) * tau
    spacing = float(demo.get("spacing_factor", 1.0)) * tau
    samples = int(demo.get("clan_samples", demo.get("samples", 500)))
    chains = int(demo.get("clan_chains", demo.get("chains", 50)))
    per_chain = int(math.ceil(samples / chains))
    law = InitialLaw(tuple(eq.h_eq))
    largest, dens = [], []
    for c in range(chains):
        _say(progress, f"chain {c + 1}/{chains}: burn-in {burn:.3g}, {per_chain} samples every {spacing:.3g}")
        rep_idx = first_replicate + c
        pop = law.sample(spec, N, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep_idx, 1))))
        sim = Simulator(spec, pop, seed, rep_idx)
        t = burn
        sim.advance_to(t)
        for s in range(per_chain):
            if s > 0:
                t += spacing
                sim.advance_to(t)
            w = clan_weights_from_arrays(sim.clan, sim.count)
            largest.append(float(w[0]) if w.size else float("nan"))
            dens.append(float(sim.h.sum()))
            if observe is not None:
                observe(sim, c, s)
    return np.array(largest[:samples]), np.array(dens[:samples])


# ---------------------------------------------------------------------------
# membrane polarity
# ---------------------------------------------------------------------------


def patch_radius_sq(k_on: float, k_fb: float, k_off: float, D: float, R: float) -> float:
    return 2.0 * D / ((k_on + k_fb) * k_off / (k_fb - k_off) + D / R**2)


def polarity_demo(raw: dict, seed: Optional[int] = None, progress: Progress = None) -> Report:
    spec = build_spec(raw)
    sim_s, demo = section(raw, "simulation"), section(raw, "demo")
    seed = int(sim_s.get("seed", 0)) if seed is None else seed
    N = int(sim_s["N"])
    if not spec.track_clans:
        raise ModelError("the polarity demo needs clan tracking")
    k_on, k_fb, k_off = float(demo["k_on"]), float(demo["k_fb"]), float(demo["k_off"])
    D, R = float(spec.domain.diffusion[0]), float(spec.domain.radius)
    eq = find_equilibrium(spec)
    avg = averaged_coefficients(spec, eq)
    h_stated = 1.0 - k_off / k_fb
    alpha = k_on / k_fb
    r2 = patch_radius_sq(k_on, k_fb, k_off, D, R)
    share = float(demo.get("dominant_share", 0.1))
    rep = Report("polarity")

    disp, pair, ndom, fine_h = [], [], [], []
    tau = clan_relaxation_time(eq, avg)
    fine = float(demo.get("density_step", 0.1)) * tau
    last = {}

    def observe(sim, c, s):
        cs = stats.clan_statistics(sim.population(), spec.domain, share)
        disp.append(cs.dominant_dispersion)
        pair.append(cs.dominant_pair_dispersion)
        ndom.append(cs.n_dominant)
        if c == 0:
            last["pop"] = sim.population()
        # density on a finer grid up to the next sample time
        t0 = sim.t
        for k in range(1, int(round(float(demo.get("spacing_factor", 1.0)) * tau / fine))):
            sim.advance_to(t0 + k * fine)
            fine_h.append(float(sim.h.sum()))

    largest, dens = stationary_clan_samples(spec, eq, avg, N, seed, demo, progress=progress, observe=observe)
    n = len(largest)
    disp, pair, ndom = np.array(disp[:n]), np.array(pair[:n]), np.array(ndom[:n])
    mean_h = float(np.mean(np.concatenate([dens, fine_h])))
    rep.check("time-averaged membrane density", mean_h, f"{h_stated:g} +- 0.05", abs(mean_h - h_stated) <= 0.05)
    pd = sample_poisson_dirichlet(PDParams(alpha), seed, int(demo.get("pd_samples", n)))[:, 0]
    ks = stats.compare_samples(largest, pd)
    rep.check(f"largest clan share vs PD({alpha:g}) KS p-value", ks.pvalue, "> 0.01", ks.pvalue > 0.01)
    ok = np.isfinite(disp)
    d_mean = float(disp[ok].mean()) if ok.any() else float("nan")
    p_mean = float(pair[ok].mean()) if ok.any() else float("nan")
    rep.check("dominant-clan squared dispersion about the centroid", d_mean, f"{r2:.4g} +- 25%",
              abs(d_mean - r2) <= 0.25 * r2)
    rep.check("dominant-clan mean squared pair distance", p_mean, f"{r2:.4g} +- 25%",
              abs(p_mean - r2) <= 0.25 * r2, informational=True)
    rep.check("limit resampling coefficient", eq.gamma_smpl, f"{k_off / h_stated:g}",
              abs(eq.gamma_smpl - k_off / h_stated) < 1e-10, informational=True)
    rep.tables["clan_samples.csv"] = (
        ["sample", "largest_share", "h", "dominant_dispersion", "dominant_pair_dispersion", "n_dominant"],
        [[s, largest[s], dens[s], disp[s], pair[s], ndom[s]] for s in range(n)])
    rep.tables["pd_reference.csv"] = (["sample", f"pd_{alpha:g}"], [[s, pd[s]] for s in range(len(pd))])
    rep.metrics.update(h_eq=eq.h_eq, gamma_smpl=eq.gamma_smpl, alpha=alpha, patch_radius_sq=r2,
                       mean_density=mean_h, ks=ks.__dict__, dominant_dispersion=d_mean,
                       dominant_pair_dispersion=p_mean, samples_with_dominant_clan=int(ok.sum()),
                       clan_relaxation_time=tau, mean_largest_share=float(np.mean(largest)))
    rep.figures["largest_share_ecdf.png"] = plotting.ecdf_compare(
        {"particle system": largest, f"PD({alpha:g})": pd}, "largest clan share", f"N={N}")
    rep.figures["dispersion.png"] = plotting.histogram(
        disp[ok], "dominant-clan squared dispersion", {"patch formula": r2, "mean": d_mean})
    if "pop" in last:
        pop = last["pop"]
        rep.figures["clans_on_sphere.png"] = plotting.sphere_clans(pop.locations[0], pop.clans[0])
        rep.snapshots["final_state_chain0.txt"] = pop
    return rep


__all__ = [
    "Check", "Report", "clan_relaxation_time", "genetics_demo", "patch_radius_sq", "polarity_demo",
    "run_fixation", "scaling_study", "stationary_clan_samples", "with_infinite_alleles",
]
