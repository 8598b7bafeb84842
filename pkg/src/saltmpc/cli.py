"""Command-line front end: experiment configs, drivers and CSV emission.

Subcommands: solve, covcompare, montecarlo, bench. One YAML config file
describes an experiment; --seed/--out/--threads override its fields. All CSV
output is UTF-8 with LF line endings, a mandatory header row and floats
printed with 17 significant digits so that seeded runs reproduce byte for
byte. Exit codes: 0 success, 1 usage/parse error, 2 solver non-convergence,
3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import benchmarks
from .errors import SaltMpcError
from .mpc_runtime import (
    BipedExperiment,
    MpcConfig,
    benchmark_iterations,
    covariance_forecast_experiment,
    monte_carlo_compare,
)
from .ocp import covariance_pass, solve, transcribe

ENV_CONFIG = "SALTMPC_CONFIG"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_UNCONVERGED = 2
EXIT_INTERNAL = 3


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Declarative experiment description; saved/loaded as canonical YAML."""

    model: str = "planar-biped"
    variant: str = "gs-smpc"
    seed: int = 0
    out_dir: str = "results"
    threads: int = 1
    schedule: dict = field(default_factory=lambda: {
        "gait": "walk", "horizon": 0.8, "dt": 0.02, "t0_index": 0})
    uncertainty: dict = field(default_factory=lambda: {
        "guard_cov": 1e-3, "sigma_flow": 1e-6, "sigma_jump": 1e-4,
        "probability": 0.9, "p0_pos": 0.012, "p0_vel": 0.04, "margins": {}})
    solver: dict = field(default_factory=lambda: {
        "max_iters": 80, "kkt_tol": 1e-6})
    target: list = field(default_factory=lambda: [1.0, 0.0])
    montecarlo: dict = field(default_factory=lambda: {
        "n_envs": 20, "duration": 1.6, "offset_range": 0.04,
        "violation_variants": ["gs-smpc", "mpc"]})
    covcompare: dict = field(default_factory=lambda: {
        "motions": ["forward", "curve", "step-ascent"],
        "guard_cov_values": [1e-4, 1e-3, 1e-2],
        "sigma_values": [1e-3, 1e-2],
        "horizon_nodes": 75})
    bench: dict = field(default_factory=lambda: {
        "repetitions": 30, "horizon_nodes": 40, "warm_iters": 10})

    _KNOWN = ("model", "variant", "seed", "out_dir", "threads", "schedule",
              "uncertainty", "solver", "target", "montecarlo", "covcompare",
              "bench")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(cls._KNOWN)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        config = cls()
        for key, value in data.items():
            current = getattr(config, key)
            if isinstance(current, dict):
                if not isinstance(value, dict):
                    raise ValueError(f"config section '{key}' must be a mapping")
                merged = dict(current)
                unknown_sub = set(value) - set(current)
                if unknown_sub:
                    raise ValueError(
                        f"unknown keys in config section '{key}': {sorted(unknown_sub)}")
                merged.update(value)
                setattr(config, key, merged)
            else:
                setattr(config, key, value)
        if config.variant not in ("gs-smpc", "smpc", "hmpc", "mpc"):
            raise ValueError(f"unknown variant '{config.variant}'")
        return config

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValueError("config file must contain a YAML mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in self._KNOWN}

    def emit(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True,
                              default_flow_style=False)

    def mpc_config(self, compute_kkt: bool = True) -> MpcConfig:
        unc = self.uncertainty
        return MpcConfig(
            variant=self.variant,
            horizon=float(self.schedule["horizon"]),
            dt=float(self.schedule["dt"]),
            guard_cov=float(unc["guard_cov"]),
            sigma_jump=float(unc["sigma_jump"]),
            sigma_flow=float(unc["sigma_flow"]),
            p0_pos=float(unc["p0_pos"]),
            p0_vel=float(unc["p0_vel"]),
            probability=float(unc["probability"]),
            margins=dict(unc["margins"]),
            compute_kkt=compute_kkt)


# ---------------------------------------------------------------------------
# CSV helpers


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# solve command


def _solve_problem_from_config(config: ExperimentConfig):
    sched = config.schedule
    dt = float(sched["dt"])
    horizon_nodes = int(round(float(sched["horizon"]) / dt))
    t0_index = int(sched.get("t0_index", 0))
    if config.model == "planar-biped":
        gait_kind = sched.get("gait", "walk")
        if gait_kind == "hop":
            gait = benchmarks.build_hop_gait(
                dt=dt, guard_cov=float(config.uncertainty["guard_cov"]))
        else:
            gait = benchmarks.build_walk_gait(
                dt=dt, guard_cov=float(config.uncertainty["guard_cov"]))
        model = benchmarks.biped_model(gait)
        problem = benchmarks.biped_problem(gait, model, t0_index, horizon_nodes, dt)
        x_init = np.array(gait.path(t0_index * dt))
        return problem, x_init
    if config.model == "double-integrator":
        from .ocp import ModeSchedule, OcpProblem, StageCost, StateCost
        model = benchmarks.double_integrator_model()
        times = (t0_index + np.arange(horizon_nodes + 1)) * dt
        schedule = ModeSchedule(times=times, interval_modes=(0,) * horizon_nodes,
                                jump_transitions={})
        target = np.asarray(config.target, dtype=float)
        stage = StageCost(q=np.diag([2.0, 0.5]), r=np.array([[0.2]]),
                          x_ref=lambda t: target)
        problem = OcpProblem(model=model, schedule=schedule, stage_cost=stage,
                             terminal_cost=StateCost(q=np.diag([4.0, 1.0]),
                                                     x_ref=lambda t: target))
        return problem, np.zeros(2)
    raise ValueError(f"model '{config.model}' is not supported by cmd_solve")


def cmd_solve(config: ExperimentConfig, out_dir: str) -> int:
    problem, x_init = _solve_problem_from_config(config)
    mpc = config.mpc_config()
    options = dataclasses.replace(
        mpc.solve_options(max_iters=int(config.solver["max_iters"]), merit=True),
        kkt_tol=float(config.solver["kkt_tol"]))
    trajectory, diag = solve(problem, options, x_init=x_init)
    state = transcribe(problem, x_init)
    state.states = trajectory.states.copy()
    state.inputs = [None if u is None else u.copy() for u in trajectory.inputs]
    state.gains = [None if k is None else k.copy() for k in trajectory.gains]
    covs, backoffs, _ = covariance_pass(state, problem, options)

    from .ocp import _problem_stacks
    path_stack, event_stack = _problem_stacks(problem)
    beta_names = list(dict.fromkeys(path_stack.names + event_stack.names))
    nx, nu = problem.model.nx, problem.model.nu
    header = (["t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
              + [f"P{i}{i}" for i in range(nx)]
              + [f"beta_{name}" for name in beta_names])
    rows = []
    sched = problem.schedule
    for n in range(len(sched.times)):
        row = [sched.times[n]] + list(trajectory.states[n])
        u = trajectory.inputs[n] if n < len(trajectory.inputs) else None
        row += list(u) if u is not None else [math.nan] * nu
        row += list(np.diag(covs[n]))
        names_here = (path_stack.names if (n in sched.flow_nodes)
                      else event_stack.names)
        beta_map = dict(zip(names_here, backoffs[n]))
        row += [beta_map.get(name, math.nan) for name in beta_names]
        rows.append(row)
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "trajectory.csv"), header, rows)
    diag_rows = [[k, diag.kkt_residuals[k], diag.step_sizes[k]]
                 for k in range(len(diag.kkt_residuals))]
    write_csv(os.path.join(out_dir, "diagnostics.csv"),
              ["iteration", "kkt_residual", "step_size"], diag_rows)
    if not diag.converged:
        print(f"solver did not converge within {diag.iterations} iterations "
              f"(kkt {diag.kkt_residuals[-1]:.3e})", file=sys.stderr)
        return EXIT_UNCONVERGED
    print(f"converged in {diag.iterations} iterations; wrote trajectory.csv "
          f"and diagnostics.csv to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# covcompare command


_STATE_NAMES = ("x", "y", "z", "vx", "vy", "vz")

_PLOT_SCRIPT = """#!/usr/bin/env python3
\"\"\"Plot terminal-covariance comparisons from covcompare.csv.\"\"\"
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "covcompare.csv"
rows = list(csv.DictReader(open(path)))
motions = sorted({r["motion"] for r in rows})
fig, axes = plt.subplots(1, len(motions), figsize=(5 * len(motions), 4),
                         squeeze=False)
for ax, motion in zip(axes[0], motions):
    series = defaultdict(list)
    for r in rows:
        if r["motion"] != motion or r["dimension"] != "trace" or r["error"]:
            continue
        series[r["method"]].append((float(r["sweep_value"]), float(r["value"])))
    for method, pts in sorted(series.items()):
        pts.sort()
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-", label=method)
    ax.set_title(motion)
    ax.set_xlabel("sweep value")
    ax.set_ylabel("terminal covariance trace")
    ax.legend()
fig.tight_layout()
fig.savefig("covcompare.png", dpi=150)
print("wrote covcompare.png")
"""


def cmd_covcompare(config: ExperimentConfig, out_dir: str) -> int:
    cc = config.covcompare
    cells = covariance_forecast_experiment(
        list(cc["motions"]),
        c_g_values=[float(v) for v in cc["guard_cov_values"]],
        sigma_values=[float(v) for v in cc["sigma_values"]],
        horizon_nodes=int(cc["horizon_nodes"]),
        dt=float(config.schedule["dt"]))
    rows = []
    for cell in cells:
        if cell.error:
            rows.append([cell.motion, cell.method, cell.sweep_value, "trace",
                         math.nan, cell.error])
            continue
        rows.append([cell.motion, cell.method, cell.sweep_value, "trace",
                     cell.terminal_trace, ""])
        for name, value in zip(_STATE_NAMES, cell.terminal_diag):
            rows.append([cell.motion, cell.method, cell.sweep_value, name,
                         value, ""])
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "covcompare.csv"),
              ["motion", "method", "sweep_value", "dimension", "value", "error"],
              rows)
    with open(os.path.join(out_dir, "plot_covcompare.py"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(_PLOT_SCRIPT)
    n_failed = sum(1 for c in cells if c.error)
    print(f"wrote covcompare.csv ({len(cells)} cells, {n_failed} failed) "
          f"and plot_covcompare.py to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# montecarlo command


def cmd_montecarlo(config: ExperimentConfig, out_dir: str, seed: int,
                   threads: int) -> int:
    mc = config.montecarlo
    experiment = BipedExperiment(
        duration=float(mc["duration"]),
        offset_range=float(mc["offset_range"]))
    variants = list(mc.get("violation_variants", ["gs-smpc", "smpc", "hmpc", "mpc"]))
    configs = []
    for variant in variants:
        cfg = dataclasses.replace(config.mpc_config(compute_kkt=False),
                                  variant=variant)
        if variant == "hmpc" and not cfg.margins:
            from .mpc_runtime import calibrate_hmpc_margins
            cfg = dataclasses.replace(
                cfg, margins=calibrate_hmpc_margins(cfg, experiment))
        configs.append(cfg)
    results = monte_carlo_compare(configs, experiment, int(mc["n_envs"]),
                                  seed, threads=threads)
    con_names = sorted({name for r in results for name in r.max_violation_frequency})
    header = (["variant", "n_envs", "success_rate", "n_success",
               "n_constraint_violation", "n_solver_failure", "n_fall",
               "mean_step_size"]
              + [f"max_violation_{name}" for name in con_names])
    rows = []
    for r in results:
        rows.append([
            r.variant, r.n_envs, r.success_rate,
            r.outcomes.get("success", 0),
            r.outcomes.get("constraint-violation", 0),
            r.outcomes.get("solver-failure", 0),
            r.outcomes.get("fall", 0),
            r.mean_step_size,
        ] + [r.max_violation_frequency.get(name, 0.0) for name in con_names])
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "montecarlo.csv"), header, rows)
    for r in results:
        print(f"{r.variant}: success rate {r.success_rate:.3f} over {r.n_envs} "
              f"environments")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench command


def cmd_bench(config: ExperimentConfig, out_dir: str) -> int:
    bench = config.bench
    reps = int(bench["repetitions"])
    dt = float(config.schedule["dt"])
    horizon_nodes = int(bench["horizon_nodes"])
    gait = benchmarks.build_walk_gait(dt=dt)
    model = benchmarks.biped_model(gait)
    problem = benchmarks.biped_problem(gait, model, 4, horizon_nodes, dt)
    x_init = np.array(gait.path(4 * dt))
    base = config.mpc_config()
    stochastic = dataclasses.replace(base, variant="gs-smpc").solve_options(1)
    nominal = dataclasses.replace(base, variant="mpc").solve_options(1)
    rows = []
    samples = {}
    for mode, options in (("stochastic", stochastic), ("nominal", nominal)):
        times = benchmark_iterations(problem, options, x_init,
                                     repetitions=reps,
                                     warm_iters=int(bench["warm_iters"]))
        samples[mode] = times
        rows += [[mode, k, times[k]] for k in range(reps)]
    ratio = float(np.mean(samples["stochastic"]) / np.mean(samples["nominal"]))
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "bench.csv"),
              ["mode", "repetition", "seconds"], rows)
    write_csv(os.path.join(out_dir, "bench_summary.csv"),
              ["mode", "mean_seconds", "median_seconds"],
              [[mode, float(np.mean(samples[mode])), float(np.median(samples[mode]))]
               for mode in ("stochastic", "nominal")]
              + [["ratio", ratio, ratio]])
    print(f"per-iteration mean: stochastic {np.mean(samples['stochastic'])*1e3:.2f} ms, "
          f"nominal {np.mean(samples['nominal'])*1e3:.2f} ms, ratio {ratio:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saltmpc",
        description="Stochastic/robust NMPC experiments for hybrid systems")
    parser.add_argument("--config", help=f"experiment config file "
                        f"(or ${ENV_CONFIG})")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--threads", type=int, help="parallel rollout workers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "covcompare", "montecarlo", "bench"):
        sub.add_parser(name)
    parser.add_argument("--emit-config", action="store_true",
                        help="print the canonical config and exit")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config_path = args.config or os.environ.get(ENV_CONFIG)
    try:
        if config_path:
            config = ExperimentConfig.from_file(config_path)
        else:
            config = ExperimentConfig()
    except (OSError, yaml.YAMLError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.emit_config:
        sys.stdout.write(config.emit())
        return EXIT_OK
    seed = args.seed if args.seed is not None else int(config.seed)
    out_dir = args.out or config.out_dir
    threads = args.threads if args.threads is not None else int(config.threads)
    try:
        if args.command == "solve":
            return cmd_solve(config, out_dir)
        if args.command == "covcompare":
            return cmd_covcompare(config, out_dir)
        if args.command == "montecarlo":
            return cmd_montecarlo(config, out_dir, seed, threads)
        if args.command == "bench":
            return cmd_bench(config, out_dir)
        parser.error(f"unknown command {args.command}")
    except SaltMpcError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
