"""Command line entry point: ``fvlimit <subcommand> CONFIG [options] [--dotted.key value ...]``.

Exit codes: 0 success, 1 configuration error, 2 model validation failure,
3 diagnostic failure.  Every run writes into ``<out>/<run hash>/`` and
finishes by writing ``manifest.json``.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from . import demos, io, plotting
from .config import ConfigError, load, section
from .engine.simulate import SimConfig, simulate
from .flow import FlowError, averaged_coefficients, find_equilibrium, integrate_flow
from .lambda_series import LambdaError, residual_profile, solve_series
from .model import FiniteSet, ModelError, validate_model
from .reference import (
    PDParams,
    ReferenceError,
    WFParams,
    moran_absorption,
    moran_fv,
    sample_poisson_dirichlet,
    simulate_wf,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVALID, EXIT_DIAGNOSTIC = 0, 1, 2, 3

# bare override keys that live under [simulation]
_SIM_ALIASES = {"N", "seed", "T_end", "replicates", "record_points"}


def _split_overrides(extra: Sequence[str]) -> list[tuple[str, str]]:
    out = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"override {tok} needs a value") from None
        if "." not in key and key in _SIM_ALIASES:
            key = f"simulation.{key}"
        out.append((key, value))
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fvlimit",
        description="Exact particle simulation of density-regulated populations and their Fleming-Viot limits.",
        epilog="Any further '--section.key value' pair overrides the config (e.g. --N 500 --seed 7 "
               "--demo.chains 10).  Exit codes: 0 ok, 1 config error, 2 validation failure, 3 diagnostic failure.",
    )
    p.add_argument("--out", default="runs", help="root directory for run outputs (default: runs)")
    p.add_argument("--quiet", action="store_true", help="no progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="config file path or shipped config name")
        return s

    add("validate", "check the model against the standing assumptions")
    s = add("flow", "integrate the density flow and report the equilibrium")
    s.add_argument("--h0", type=float, nargs="+", help="initial density (default: [simulation].initial.h)")
    s.add_argument("--T", type=float, default=10.0, help="time horizon of the flow")
    add("lambda", "power series of Lambda about h_eq with residual report")
    add("simulate", "run the particle system and persist trajectories")
    s = add("reference", "sample a limiting-process reference")
    s.add_argument("kind", choices=["wf", "pd", "moran", "absorption"])
    add("compare", "N-scaling diagnostics of density and spatial fusion")
    s = sub.add_parser("demo", help="shipped application pipelines")
    s.add_argument("name", choices=["genetics", "polarity"])
    s.add_argument("config", nargs="?", help="config (default: the shipped one of the same name)")
    return p


# ---------------------------------------------------------------------------
# subcommands; each returns an exit code
# ---------------------------------------------------------------------------


def _write_report(run: io.RunDir, rep: demos.Report) -> None:
    for name, (header, rows) in rep.tables.items():
        run.write_csv(name, header, rows)
    for name, fig in rep.figures.items():
        run.figure(name, fig)
    for name, pop in rep.snapshots.items():
        run.write_text(name, io.snapshot_text(pop))
    run.write_csv("summary.csv", ["check", "value", "target", "result", "kind"], [c.row() for c in rep.checks])
    run.write_json("metrics.json", rep.metrics)


def cmd_validate(raw, spec, run, args, say) -> int:
    report = validate_model(spec)
    text = report.render()
    run.write_text("validation.txt", text + "\n")
    run.write_csv("checks.csv", ["check", "part", "passed", "detail"],
                  [[c.name, c.part, c.passed, c.detail] for c in report.checks])
    eq = report.equilibrium
    if eq is not None:
        run.write_json("equilibrium.json", eq.summary())
        fl = integrate_flow(spec, np.asarray(eq.h_eq) * 0.5, 5.0 * eq.relaxation_time)
        run.figure("flow_to_equilibrium.png", plotting.flow_paths(fl.t, fl.h, eq.h_eq))
    print(text)
    return EXIT_OK if report.accepted else EXIT_INVALID


def _h0(raw, spec, args) -> np.ndarray:
    if args.h0 is not None:
        if len(args.h0) != spec.q:
            raise ConfigError(f"--h0 needs {spec.q} values")
        return np.array(args.h0)
    init = section(raw, "simulation").get("initial")
    if init is None:
        raise ConfigError("no initial density: pass --h0 or set simulation.initial.h")
    return np.array(init["h"], dtype=float)


def cmd_flow(raw, spec, run, args, say) -> int:
    h0 = _h0(raw, spec, args)
    fl = integrate_flow(spec, h0, args.T)
    t = np.linspace(0.0, args.T, 201)
    h = fl.solution(t).T
    run.write_csv("trajectory.csv", ["t"] + [f"h_{i + 1}" for i in range(spec.q)],
                  ([t[g], *h[g]] for g in range(len(t))))
    try:
        eq = find_equilibrium(spec)
    except FlowError as exc:
        run.write_text("equilibrium.txt", f"status: failed\nreason: {exc}\n")
        run.figure("flow.png", plotting.flow_paths(t, h))
        print(f"equilibrium: {exc}")
        return EXIT_INVALID
    avg = averaged_coefficients(spec, eq)
    summ = eq.summary()
    lines = ["status: ok"] + [f"{k}: {v}" for k, v in summ.items()]
    lines += [f"flow_end: {h[-1].tolist()}", f"B_avg_weights: {avg.migration_weights.tolist()}",
              f"new_clan_rate: {avg.new_clan_rate!r}"]
    run.write_text("equilibrium.txt", "\n".join(lines) + "\n")
    run.figure("flow.png", plotting.flow_paths(t, h, eq.h_eq))
    print("\n".join(lines))
    return EXIT_OK


def cmd_lambda(raw, spec, run, args, say) -> int:
    ls = section(raw, "lambda")
    k_max = int(ls.get("k_max", 8))
    eq = find_equilibrium(spec)
    series = solve_series(spec, eq, k_max=k_max)
    run.write_csv("coefficients.csv", ["alpha"] + [f"gamma_{i + 1}" for i in range(spec.q)],
                  ([" ".join(map(str, a)), *g] for a, g in series.table()))
    radii, worst, slope = residual_profile(spec, series)
    run.write_csv("residual.csv", ["radius", "max_residual"], zip(radii, worst))
    run.write_csv("degree_diagnostics.csv",
                  ["k", "size", "condition", "dominant", "inverse_norm", "varah_bound", "proof_bound", "bound_ok"],
                  ([d.k, d.size, d.condition, d.dominant, d.inverse_norm, d.varah_bound, d.proof_bound, d.bound_ok]
                   for d in series.diagnostics))
    ok = slope >= k_max + 0.5
    report = {"k_max": k_max, "r_trust": series.r_trust, "C_hat": series.C_hat, "eps0": series.eps0,
              "growth_ok": series.growth_ok(), "notes": list(series.notes),
              "residual_slope": slope, "slope_ok": ok}
    run.write_json("lambda_report.json", report)
    run.figure("residual.png", plotting.residual_profile(radii, worst, slope, k_max))
    print(io.dumps(report))
    return EXIT_OK if ok else EXIT_DIAGNOSTIC


def _sim_config(raw, spec) -> tuple[SimConfig, int]:
    s = section(raw, "simulation")
    for key, kind in (("N", int), ("replicates", int), ("record_points", int), ("seed", int),
                      ("T_end", float), ("t_N", float)):
        if key in s and (isinstance(s[key], bool) or not isinstance(s[key], (int, float) if kind is float else int)):
            raise ConfigError(f"simulation.{key}: expected {'a number' if kind is float else 'an integer'}, "
                              f"got {s[key]!r}")
    cfg = SimConfig(N=int(s.get("N", 100)), T_end=float(s.get("T_end", 1.0)), seed=int(s.get("seed", 0)),
                    t_N=s.get("t_N"), record_points=int(s.get("record_points", 101)),
                    initial=demos._initial_from(raw), clan_sizes=spec.track_clans)
    return cfg, int(s.get("replicates", 1))


def cmd_simulate(raw, spec, run, args, say) -> int:
    cfg, reps = _sim_config(raw, spec)
    records, finals = [], []
    for r in range(reps):
        say(f"replicate {r + 1}/{reps}")
        rec, pop = simulate(spec, cfg, replicate=r)
        records.append(rec)
        finals.append(pop)
    header, rows = io.trajectory_rows(records)
    run.write_csv("trajectories.csv", header, rows)
    run.write_json("trajectories_meta.json", io.trajectory_meta(records))
    run.write_jsonl("events.jsonl", io.event_summaries(records))
    for r, pop in enumerate(finals):
        run.write_text(f"final_state_{r}.txt", io.snapshot_text(pop))
    if spec.track_clans:
        run.write_csv("largest_clan_share.csv", ["replicate", "t", "largest_share"],
                      ([r, rec.times[g], (w[0] if len(w) else 0.0)] for r, rec in enumerate(records)
                       for g, w in enumerate(rec.clan_sizes)))
    h_eq = None
    try:
        h_eq = find_equilibrium(spec).h_eq
    except FlowError:
        pass
    run.figure("density.png", plotting.density_paths(records, h_eq, f"{spec.name}, N={cfg.N}"))
    bad = [r for r, rec in enumerate(records) if rec.status == "exploded"]
    for r, rec in enumerate(records):
        print(f"replicate {r}: status={rec.status} final h={(rec.counts[-1] / rec.N).tolist()}")
    return EXIT_DIAGNOSTIC if bad else EXIT_OK


def cmd_reference(raw, spec, run, args, say) -> int:
    rs = section(raw, "reference")
    seed = int(rs.get("seed", section(raw, "simulation").get("seed", 0)))
    eq = find_equilibrium(spec)
    avg = averaged_coefficients(spec, eq)
    kind = args.kind
    if kind == "wf":
        wf = WFParams.from_averaged(avg)
        x0 = np.asarray(rs.get("x0", np.full(wf.K, 1.0 / wf.K)), dtype=float)
        T = float(rs.get("T", 1.0))
        path = simulate_wf(wf, x0, T, dt=float(rs.get("dt", 1e-4)), seed=seed, n_paths=int(rs.get("paths", 1000)),
                           record_times=np.linspace(0.0, T, 21))
        run.write_csv("wf_samples.csv", ["path"] + [f"x_{k + 1}" for k in range(wf.K)],
                      ([p, *path.x[-1, p]] for p in range(path.x.shape[1])))
        run.figure("wf_paths.png", plotting.wf_paths(path.times, path.x))
        print(f"WF: {path.x.shape[1]} paths to T={T}, mean x = {path.x[-1].mean(axis=0).tolist()}")
    elif kind == "pd":
        alpha = float(rs.get("alpha", avg.new_clan_rate / avg.gamma_smpl if avg.new_clan_rate > 0 else 0.0))
        if not alpha > 0:
            raise ConfigError("reference.alpha must be set (the model has no fresh-clan mechanism)")
        w = sample_poisson_dirichlet(PDParams(alpha), seed, int(rs.get("samples", 1000)))
        top = min(10, w.shape[1])
        run.write_csv("pd_samples.csv", ["sample"] + [f"w_{k + 1}" for k in range(top)],
                      ([s, *w[s, :top]] for s in range(w.shape[0])))
        run.figure("pd_largest.png", plotting.histogram(w[:, 0], "largest weight", title=f"PD({alpha:g})"))
        print(f"PD({alpha:g}): mean largest weight {w[:, 0].mean():.4f}")
    elif kind == "moran":
        M, T = int(rs.get("M", 1000)), float(rs.get("T", 1.0))
        res = moran_fv(avg, M, T, seed=seed, record_times=np.linspace(0.0, T, 51),
                       calibration_replicates=int(rs.get("calibration_replicates", 20000)))
        names = sorted(res.observables)
        run.write_csv("moran_observables.csv", ["t"] + names,
                      ([res.times[g], *(res.observables[n][g] for n in names)] for g in range(len(res.times))))
        if res.calibration:
            run.write_csv("moran_calibration.csv", ["test", "z", "estimate", "exact_finite_M", "limit", "stderr"],
                          ([c.name, c.z, c.estimate, c.exact_finite_M, c.limit, c.stderr] for c in res.calibration))
        run.write_json("moran_counters.json", res.counters)
        fig = plotting.density_paths([], None)
        ax = fig.axes[0]
        for k, n in enumerate(names):
            ax.plot(res.times, res.observables[n], color=f"C{k}", label=n)
        ax.set_ylabel("<f, nu_M>")
        ax.legend(loc="best")
        run.figure("moran_observables.png", fig)
        print(f"Moran M={M}: counters {res.counters}")
    else:
        dom = spec.domain
        M = int(rs.get("M", 100))
        w = float(rs.get("w", 1.0))
        ks = list(range(M + 1))
        probs = [moran_absorption(M, w, k) for k in ks]
        run.write_csv("absorption.csv", ["k", "fixation_probability"], zip(ks, probs))
        fig = plotting.density_paths([], None)
        fig.axes[0].plot(ks, probs)
        fig.axes[0].set_xlabel("initial count k")
        fig.axes[0].set_ylabel("fixation probability")
        run.figure("absorption.png", fig)
        print(f"Moran absorption M={M} w={w}: P(k=1)={probs[1]:.6g}" + ("" if isinstance(dom, FiniteSet) else ""))
    return EXIT_OK


def cmd_compare(raw, spec, run, args, say) -> int:
    cs = section(raw, "compare")
    rep = demos.scaling_study(
        raw, Ns=tuple(int(n) for n in cs.get("Ns", (100, 400, 1600))), replicates=int(cs.get("replicates", 50)),
        T=float(cs.get("T", 1.0)), record_points=int(cs.get("record_points", 101)),
        max_deviation=cs.get("max_deviation"), max_inseparability=cs.get("max_inseparability"), progress=say)
    _write_report(run, rep)
    print(rep.render())
    return EXIT_OK if rep.passed else EXIT_DIAGNOSTIC


def cmd_demo(raw, spec, run, args, say) -> int:
    fn = demos.genetics_demo if args.name == "genetics" else demos.polarity_demo
    rep = fn(raw, progress=say)
    _write_report(run, rep)
    print(rep.render())
    return EXIT_OK if rep.passed else EXIT_DIAGNOSTIC


COMMANDS = {"validate": cmd_validate, "flow": cmd_flow, "lambda": cmd_lambda, "simulate": cmd_simulate,
            "reference": cmd_reference, "compare": cmd_compare, "demo": cmd_demo}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    say = (lambda m: None) if args.quiet else (lambda m: print(m, file=sys.stderr, flush=True))
    try:
        overrides = _split_overrides(extra)
        cfg_name = args.config if args.config is not None else args.name
        raw, spec = load(cfg_name, overrides)
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    command = [args.command] + [getattr(args, k) for k in ("name", "kind") if getattr(args, k, None)]
    if args.command == "flow":
        command += [f"h0={args.h0}", f"T={args.T}"]
    run_dir = io.RunDir(args.out, raw, command, section(raw, "simulation").get("seed"))
    say(f"writing to {run_dir.path}")
    try:
        code = COMMANDS[args.command](raw, spec, run_dir, args, say)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (ModelError, FlowError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        code = EXIT_INVALID
    except (LambdaError, ReferenceError) as exc:
        print(f"diagnostic failure: {exc}", file=sys.stderr)
        code = EXIT_DIAGNOSTIC
    status = {EXIT_OK: "ok", EXIT_CONFIG: "config_error", EXIT_INVALID: "validation_failure",
              EXIT_DIAGNOSTIC: "diagnostic_failure"}[code]
    run_dir.finish(status, code)
    return code


def main() -> None:
    sys.exit(run())


__all__ = ["EXIT_CONFIG", "EXIT_DIAGNOSTIC", "EXIT_INVALID", "EXIT_OK", "main", "run"]
