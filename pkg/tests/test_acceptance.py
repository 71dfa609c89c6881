"""End-to-end acceptance checks, one test per criterion.

Each test prints one line per measured quantity with its target and
PASS/FAIL; the lines are repeated in the terminal summary.  Thresholds are
the published ones; nothing here is loosened to make a check pass.
"""

import time

import numpy as np
import pytest
from scipy import stats

from fvlimit import cli, config, demos, io
from fvlimit.engine import InitialLaw, Simulator
from fvlimit.engine.generator import final_site_counts, generator_consistency_test, shipped_test_functions
from fvlimit.engine.kernel import DEATH, LOCAL_BIRTH, MIGRATION
from fvlimit.flow import find_equilibrium
from fvlimit.lambda_series import extend_lambda, residual_profile, solve_series, transport_matrix


def _fmt(x):
    return np.array2string(np.asarray(x), precision=12) if np.ndim(x) else f"{x:.6g}"


# ---------------------------------------------------------------------------- 1


def test_criterion_1_equilibria(criterion):
    t0 = time.perf_counter()
    log = find_equilibrium(config.load("logistic")[1])
    sym = find_equilibrium(config.load("symmetric")[1])
    runtime = time.perf_counter() - t0
    eig = np.sort(sym.eig_A.real)
    ok = [
        criterion(1, "logistic h_eq", _fmt(log.h_eq), "2.0 +- 1e-10", abs(log.h_eq[0] - 2.0) < 1e-10),
        criterion(1, "logistic v_eq", _fmt(log.v_eq), "0.5", abs(log.v_eq[0] - 0.5) < 1e-10),
        criterion(1, "logistic gamma_smpl", _fmt(log.gamma_smpl), "1.0", abs(log.gamma_smpl - 1.0) < 1e-10),
        criterion(1, "symmetric h_eq", _fmt(sym.h_eq), "(1.5, 1.5)", np.abs(sym.h_eq - 1.5).max() < 1e-10),
        criterion(1, "symmetric v_eq", _fmt(sym.v_eq), "(1/3, 1/3)", np.abs(sym.v_eq - 1 / 3).max() < 1e-10),
        criterion(1, "symmetric eig A(h_eq)", _fmt(eig), "{-2, 0} +- 1e-8",
                  np.abs(eig - [-2.0, 0.0]).max() < 1e-8 and np.abs(sym.eig_A.imag).max() < 1e-8),
        criterion(1, "symmetric gamma_smpl", _fmt(sym.gamma_smpl), "1.0", abs(sym.gamma_smpl - 1.0) < 1e-10),
        criterion(1, "runtime", f"{runtime:.3f} s", "< 1 s", runtime < 1.0),
    ]
    assert all(ok)


# ---------------------------------------------------------------------------- 2


def test_criterion_2_lambda(criterion):
    t0 = time.perf_counter()
    _, log_spec = config.load("logistic")
    _, sym_spec = config.load("symmetric")
    k_max = 8
    log_s = solve_series(log_spec, find_equilibrium(log_spec), k_max=k_max)
    sym_s = solve_series(sym_spec, find_equilibrium(sym_spec), k_max=k_max)
    ok = []
    coef_err = max(abs(log_s.coefficient((k,))[0] - (-1) ** k * 2.0 ** -(k + 1)) for k in range(k_max + 1))
    ok.append(criterion(2, "logistic coefficient error (k <= 8)", _fmt(coef_err), "< 1e-10", coef_err < 1e-10))
    g = np.linspace(0.8, 2.5, 10)
    grid_err = max(np.abs(extend_lambda(sym_spec, sym_s, [a, b]) - 1 / (a + b)).max() for a in g for b in g)
    ok.append(criterion(2, "symmetric extension error on 10x10 grid", _fmt(grid_err), "< 1e-7", grid_err < 1e-7))
    for name, spec, s in (("logistic", log_spec, log_s), ("symmetric", sym_spec, sym_s)):
        _, _, slope = residual_profile(spec, s)
        ok.append(criterion(2, f"{name} residual slope (k_max=8)", _fmt(slope), f">= {k_max + 0.5}",
                            slope >= k_max + 0.5))
    h = np.array([0.7, 2.2])
    ck = max(np.abs(transport_matrix(sym_spec, h, t0_) - transport_matrix(sym_spec, h, s_)
                    @ transport_matrix(sym_spec, h, t0_, s_)).max()
             for t0_, s_ in ((2.0, 0.8), (1.0, 0.3), (4.0, 3.5)))
    ok.append(criterion(2, "transport Chapman-Kolmogorov defect", _fmt(ck), "< 1e-7", ck < 1e-7))
    neg = min(transport_matrix(sym_spec, hh, t).min() for hh in ([0.4, 2.6], [2.0, 0.5]) for t in (0.1, 1.0, 5.0))
    ok.append(criterion(2, "transport min entry", _fmt(neg), ">= -1e-7", neg >= -1e-7))
    runtime = time.perf_counter() - t0
    ok.append(criterion(2, "runtime", f"{runtime:.2f} s", "< 10 s", runtime < 10.0))
    assert all(ok)


# ---------------------------------------------------------------------------- 3


def test_criterion_3_generator_consistency(criterion):
    t0 = time.perf_counter()
    N, R = 50, 100_000
    delta = 1e-4 / N
    ok = []
    for name in ("logistic", "symmetric", "immigration"):
        raw, spec = config.load(name)
        pop = demos._initial_from(raw).sample(spec, N, np.random.default_rng(0))
        finals = final_site_counts(spec, pop, delta, R, seed=17)
        for F in shipped_test_functions(spec):
            res = generator_consistency_test(spec, F, pop, delta, R, 17, finals=finals)
            ok.append(criterion(3, f"{name} {F.name} z", f"{res.z:+.3f}", "|z| < 4", abs(res.z) < 4))
    runtime = time.perf_counter() - t0
    ok.append(criterion(3, "runtime", f"{runtime:.1f} s", "< 120 s", runtime < 120))
    assert all(ok)


# ---------------------------------------------------------------------------- 4


def test_criterion_4_scaling(criterion):
    t0 = time.perf_counter()
    raw, _ = config.load("symmetric")
    rep = demos.scaling_study(raw, Ns=(100, 400, 1600), replicates=50, T=1.0,
                              max_deviation=0.15, max_inseparability=0.1)
    runtime = time.perf_counter() - t0
    for c in rep.checks:
        criterion(4, c.name, _fmt(c.value), c.target, c.passed if not c.informational else True)
    medians = rep.tables["scaling_medians.csv"]
    for row in medians[1]:
        criterion(4, f"medians at N={row[0]}", ", ".join(f"{v:.4g}" for v in row[1:]), "info", True)
    ok = criterion(4, "runtime", f"{runtime:.0f} s", "< 1200 s", runtime < 1200)
    assert rep.passed and ok


# ---------------------------------------------------------------------------- 5


def test_criterion_5_genetics(criterion):
    t0 = time.perf_counter()
    rep = demos.genetics_demo(config.load("genetics")[0])
    runtime = time.perf_counter() - t0
    for c in rep.checks:
        criterion(5, c.name + (" (info)" if c.informational else ""), _fmt(c.value), c.target,
                  c.passed if not c.informational else True)
    ok = criterion(5, "runtime", f"{runtime:.0f} s", "< 3600 s", runtime < 3600)
    assert rep.passed and ok


# ---------------------------------------------------------------------------- 6


def test_criterion_6_polarity(criterion):
    t0 = time.perf_counter()
    raw = config.load("polarity", [("simulation.N", "2000")])[0]
    rep = demos.polarity_demo(raw)
    runtime = time.perf_counter() - t0
    for c in rep.checks:
        criterion(6, c.name + (" (info)" if c.informational else ""), _fmt(c.value), c.target,
                  c.passed if not c.informational else True)
    ok = criterion(6, "runtime", f"{runtime:.0f} s", "< 3600 s", runtime < 3600)
    assert rep.passed and ok


# ---------------------------------------------------------------------------- 7


def brute_force_rates(n0, n1, N=5, beta=2.0, m=1.0):
    """Transition rates of the two-site logistic chain written out by hand."""
    n = n0 + n1
    return {
        ("birth", 0): n0 * N * beta, ("birth", 1): n1 * N * beta,
        ("death", 0): n0 * n, ("death", 1): n1 * n,  # N * rho(h) = N * n / N per particle
        ("move", 0): n0 * m, ("move", 1): n1 * m,
    }


def test_criterion_7_engine_exactness(criterion):
    t0 = time.perf_counter()
    _, spec = config.load("logistic", [("simulation.N", "5")])
    N, events = 5, 100_000
    pop = InitialLaw((2.0,)).sample(spec, N, np.random.default_rng(0))
    sim = Simulator(spec, pop, seed=29, trace_capacity=events)
    start = sim.sites[0].copy()
    while sim.ntrace[0] < events:
        assert sim.advance_to(sim.t + 50.0) == "ok"
    _, v = sim.trace()
    label = {LOCAL_BIRTH: "birth", DEATH: "death", MIGRATION: "move"}
    observed, visits = {}, {}
    state = tuple(int(x) for x in start)
    for kind, _, _, a, _ in v:
        visits[state] = visits.get(state, 0) + 1
        key = (state, (label[int(kind)], int(a)))
        observed[key] = observed.get(key, 0) + 1
        n = list(state)
        if kind == LOCAL_BIRTH:
            n[a] += 1
        elif kind == DEATH:
            n[a] -= 1
        else:
            n[a] -= 1
            n[1 - a] += 1
        state = tuple(n)
    chi2, dof = 0.0, 0
    for s, k in visits.items():
        rates = brute_force_rates(*s)
        total = sum(rates.values())
        exp = {c: k * r / total for c, r in rates.items() if r > 0}
        obs = {c: observed.get((s, c), 0) for c in exp}
        assert sum(obs.values()) == k and all(observed.get((s, c), 0) == 0 for c in rates if rates[c] == 0)
        big = [c for c in exp if exp[c] >= 5]
        small = [c for c in exp if exp[c] < 5]
        cells = [(obs[c], exp[c]) for c in big]
        if small:
            cells.append((sum(obs[c] for c in small), sum(exp[c] for c in small)))
        if cells and cells[-1][1] < 5 and len(cells) > 1:
            o, e = cells.pop()
            cells[-1] = (cells[-1][0] + o, cells[-1][1] + e)
        if len(cells) < 2:
            continue
        chi2 += sum((o - e) ** 2 / e for o, e in cells)
        dof += len(cells) - 1
    p = float(stats.chi2.sf(chi2, dof))
    runtime = time.perf_counter() - t0
    ok = [
        criterion(7, "embedded-chain chi-square", f"chi2={chi2:.1f} dof={dof} p={p:.4f}", "p > 0.01", p > 0.01),
        criterion(7, "events", str(len(v)), f">= {events}", len(v) >= events),
        criterion(7, "runtime", f"{runtime:.1f} s", "< 300 s", runtime < 300),
    ]
    assert all(ok)


# ---------------------------------------------------------------------------- 8

SMALL_RUNS = [
    ["validate", "logistic"],
    ["validate", "decoupled"],
    ["flow", "symmetric"],
    ["lambda", "symmetric"],
    ["simulate", "symmetric", "--N", "100", "--replicates", "2"],
    ["simulate", "polarity", "--N", "100", "--T_end", "0.2", "--replicates", "1"],
    ["reference", "logistic", "wf", "--reference.paths", "200"],
    ["reference", "genetics", "pd", "--reference.alpha", "0.5", "--reference.samples", "200"],
    ["reference", "genetics", "moran", "--reference.M", "200", "--reference.calibration_replicates", "2000"],
    ["reference", "logistic", "absorption"],
    ["compare", "symmetric", "--compare.Ns", "[50, 100]", "--compare.replicates", "3"],
    ["demo", "genetics", "--N", "200", "--demo.fixation_replicates", "20", "--demo.clan_chains", "2",
     "--demo.clan_samples", "10", "--demo.pd_samples", "10"],
    ["demo", "polarity", "--N", "300", "--demo.chains", "2", "--demo.samples", "6"],
]


def test_criterion_8_determinism(tmp_path, criterion):
    ok = []
    for argv in SMALL_RUNS:
        outs, codes = [], []
        for rep in ("a", "b"):
            root = tmp_path / rep
            before = set(root.iterdir()) if root.exists() else set()
            codes.append(cli.run(["--out", str(root), "--quiet", *argv]))
            new = sorted(set(root.iterdir()) - before)
            assert len(new) == 1, argv
            outs.append(new[0])
        a, b = outs
        names = sorted(p.name for p in a.iterdir())
        same = codes[0] == codes[1] and names == sorted(p.name for p in b.iterdir())
        differing = []
        for n in names:
            if n == "manifest.json":
                if io.read_manifest(a / n, True) != io.read_manifest(b / n, True):
                    differing.append(n)
            elif (a / n).read_bytes() != (b / n).read_bytes():
                differing.append(n)
        same = same and not differing
        ok.append(criterion(8, " ".join(argv[:3]), f"{len(names)} files, exit {codes[0]}"
                            + (f", differing: {differing}" if differing else ""), "byte-identical", same))
    assert all(ok)
