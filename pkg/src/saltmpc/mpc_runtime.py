"""Real-time-iteration MPC loop, closed-loop plant simulation and the
Monte-Carlo comparison harness for the controller variants.

The plant integrates the true hybrid dynamics with per-transition guard
offsets (estimated minus actual terrain heights, so positive offsets delay
contact), detects events by bisection on the offset guard and applies the
true reset maps. Between solves the commanded input is a zero-order hold
plus linear state feedback from the stored gain.
"""

from __future__ import annotations

import copy
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import benchmarks
from .errors import SaltMpcError
from .hybrid_model import HybridModel, evaluate_flow, evaluate_guard, evaluate_reset
from .ocp import OcpProblem, SolveOptions, iterate, transcribe


# ---------------------------------------------------------------------------
# configuration


VARIANTS = ("gs-smpc", "smpc", "hmpc", "mpc")


@dataclass
class MpcConfig:
    """Controller variant and uncertainty parameters.

    The variant determines only the jump-covariance rule and the source of
    the backoff terms; every other code path is shared.
    """

    variant: str = "gs-smpc"
    horizon: float = 0.8
    dt: float = 0.02
    guard_cov: float = 1e-3
    sigma_jump: float = 1e-4
    sigma_flow: float = 1e-6
    p0_pos: float = 0.012     # state-estimate position std (initial covariance)
    p0_vel: float = 0.04
    probability: float = 0.9
    margins: dict = field(default_factory=dict)
    real_time_iters: int = 1
    warmup_iters: int = 15
    compute_kkt: bool = True
    mu: float = 1e-3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown MPC variant '{self.variant}'")

    @property
    def horizon_nodes(self) -> int:
        return int(round(self.horizon / self.dt))

    def solve_options(self, max_iters: int, merit: bool = False) -> SolveOptions:
        # merit backtracking is reserved for cold starts; warmstarted
        # real-time iterations rely on the fraction-to-boundary caps
        base = dict(max_iters=max_iters, mu=self.mu, merit_backtracking=merit)
        p0 = (self.p0_pos ** 2, self.p0_vel ** 2)
        if self.variant == "gs-smpc":
            return SolveOptions(jump_rule="saltation", backoff_source="covariance",
                                guard_cov_override=self.guard_cov,
                                w_flow_override=self.sigma_flow,
                                p0=p0, **base)
        if self.variant == "smpc":
            return SolveOptions(jump_rule="dynamics", backoff_source="covariance",
                                guard_cov_override=0.0,
                                w_flow_override=self.sigma_flow,
                                w_jump_override=self.sigma_jump,
                                p0=p0, **base)
        if self.variant == "hmpc":
            return SolveOptions(jump_rule="saltation", backoff_source="margins",
                                margins=dict(self.margins),
                                guard_cov_override=0.0, w_flow_override=0.0,
                                **base)
        return SolveOptions(jump_rule="saltation", backoff_source="none",
                            guard_cov_override=0.0, w_flow_override=0.0,
                            **base)


# ---------------------------------------------------------------------------
# MPC controller (real-time iteration)


@dataclass
class _StoredSolution:
    times: np.ndarray
    states: np.ndarray
    input_times: np.ndarray
    inputs: np.ndarray
    gains: np.ndarray


class MpcController:
    """Receding-horizon controller running one Newton-type iteration per step.

    ``problem_factory(t0_index)`` must return the OCP window anchored at that
    grid index; the stored previous solution warmstarts each window by linear
    interpolation in time (zero-order hold beyond the ends).
    """

    def __init__(self, problem_factory: Callable[[int], OcpProblem],
                 config: MpcConfig):
        self.factory = problem_factory
        self.config = config
        self.stored: Optional[_StoredSolution] = None
        self.last_input: Optional[np.ndarray] = None
        self.last_gain: Optional[np.ndarray] = None
        self.failures_in_a_row = 0
        self.steps = 0

    def _warmstart(self, problem: OcpProblem, x_measured):
        sched = problem.schedule
        nx = problem.model.nx
        nu = problem.model.nu
        if self.stored is None:
            return None
        st = self.stored
        states = np.empty((len(sched.times), nx))
        for d in range(nx):
            states[:, d] = np.interp(sched.times, st.times, st.states[:, d])
        flow = list(sched.flow_nodes)
        flow_times = np.array([sched.times[i] for i in flow])
        u_interp = np.stack([np.interp(flow_times, st.input_times, st.inputs[:, d])
                             for d in range(nu)], axis=1)
        k_interp = np.empty((len(flow), nu, nx))
        for r in range(nu):
            for c in range(nx):
                k_interp[:, r, c] = np.interp(flow_times, st.input_times,
                                              st.gains[:, r, c])
        inputs = [None] * len(sched.times)
        gains = [None] * len(sched.times)
        for pos, i in enumerate(flow):
            inputs[i] = u_interp[pos]
            gains[i] = k_interp[pos]

        class Guess:
            pass

        guess = Guess()
        guess.states = states
        guess.inputs = inputs
        guess.gains = gains
        return guess

    def _store(self, problem: OcpProblem, state):
        sched = problem.schedule
        flow = list(sched.flow_nodes)
        self.stored = _StoredSolution(
            times=np.array(sched.times),
            states=state.states.copy(),
            input_times=np.array([sched.times[i] for i in flow]),
            inputs=np.array([state.inputs[i] for i in flow]),
            gains=np.array([state.gains[i] for i in flow]))

    def step(self, t0_index: int, x_measured: np.ndarray):
        """One MPC sample: returns (input, gain, diagnostics)."""
        cold = self.stored is None
        n_iters = self.config.warmup_iters if cold else self.config.real_time_iters
        options = self.config.solve_options(max_iters=n_iters, merit=cold)
        if not (cold or self.config.compute_kkt):
            options = dataclasses.replace(options, compute_kkt=False)
        diag = {"kkt": math.nan, "alpha": math.nan, "failed": False,
                "skipped_guards": 0}
        try:
            problem = self.factory(t0_index)
            state = transcribe(problem, x_measured,
                               initial_guess=self._warmstart(problem, x_measured))
            for _ in range(n_iters):
                info = iterate(state, options)
            diag["kkt"] = info["kkt"]
            diag["alpha"] = info["alpha"]
            diag["skipped_guards"] = info["skipped_guards"]
            first = problem.schedule.flow_nodes[0]
            self.last_input = state.inputs[first].copy()
            self.last_gain = state.gains[first].copy()
            self.last_reference = state.states[first].copy()
            self._store(problem, state)
            self.failures_in_a_row = 0
        except SaltMpcError:
            diag["failed"] = True
            self.failures_in_a_row += 1
            if self.last_input is None:
                raise
        self.steps += 1
        return self.last_input, self.last_gain, diag


# ---------------------------------------------------------------------------
# plant simulation


@dataclass
class PlantSimulator:
    """True hybrid plant with guard offsets and seeded process noise.

    guard_offsets holds, per transition, the estimation error of the guard
    (modeled minus true terrain height); positive entries delay the realized
    contact. Events fire when every offset guard component has crossed zero,
    located by bisection to 1e-8 s.
    """

    model: HybridModel
    gait: benchmarks.BipedGait
    guard_offsets: dict = field(default_factory=dict)
    substep: float = 0.005
    noise_cov: Optional[np.ndarray] = None
    seed: int = 0
    u_limits: Optional[float] = None

    def __post_init__(self):
        self._rng = np.random.default_rng(np.random.SeedSequence(self.seed))

    def offset_guard(self, transition: str, t: float, x: np.ndarray) -> np.ndarray:
        g, _, _ = evaluate_guard(self.model, transition, t, x)
        off = self.guard_offsets.get(transition)
        if off is None:
            return g
        return g + np.asarray(off, dtype=float)


@dataclass
class RolloutRecord:
    """Per-step closed-loop log plus the realized events and the outcome."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    events: list
    constraint_names: tuple
    constraint_values: np.ndarray
    violations: np.ndarray
    step_kkt: np.ndarray
    step_alpha: np.ndarray
    solver_failures: int
    outcome: str

    @property
    def success(self) -> bool:
        return self.outcome == "success"


@dataclass
class SuccessSpec:
    """Desk-scale success criterion of a rollout."""

    z_min: float = 0.9535
    z_max: float = 1.05
    tol_band: float = 1e-3
    max_consecutive_failures: int = 1


def _rk4_plant(model, mode, t, x, u, dt):
    f1, _, _ = evaluate_flow(model, mode, t, x, u)
    f2, _, _ = evaluate_flow(model, mode, t + dt / 2, x + dt / 2 * f1, u)
    f3, _, _ = evaluate_flow(model, mode, t + dt / 2, x + dt / 2 * f2, u)
    f4, _, _ = evaluate_flow(model, mode, t + dt, x + dt * f3, u)
    return x + dt / 6 * (f1 + 2 * f2 + 2 * f3 + f4)


class _PhaseMachine:
    """Realized contact phases: liftoffs are time-driven, touchdowns are
    event-driven and gate the following liftoff."""

    def __init__(self, gait: benchmarks.BipedGait, t_start: float):
        self.gait = gait
        self.mode = gait.mode_at(t_start)
        self.pending_events = [e for e in gait.events if e.time > t_start + 1e-12]
        # liftoff spans: single-support / flight spans beginning after t_start
        self.pending_lifts = [(s, m) for (s, m) in gait.mode_spans
                              if s > t_start + 1e-12 and m != benchmarks.MODE_DOUBLE]
        self.waiting_touchdown = False

    def next_event(self):
        return self.pending_events[0] if self.pending_events else None

    def touchdown_realized(self, event):
        self.mode = event.post_mode
        self.pending_events.pop(0)
        self.waiting_touchdown = False

    def advance_time(self, t: float):
        # liftoffs fire at planned times, but never before the touchdown that
        # precedes them in the plan
        while self.pending_lifts and self.pending_lifts[0][0] <= t + 1e-12:
            lift_time, lift_mode = self.pending_lifts[0]
            nxt = self.next_event()
            if nxt is not None and nxt.time <= lift_time + 1e-12:
                break  # overdue touchdown gates this liftoff
            self.pending_lifts.pop(0)
            self.mode = lift_mode


def simulate_closed_loop(controller: MpcController, plant: PlantSimulator,
                         duration: float, t0_index: int = 0,
                         constraints=None,
                         success: Optional[SuccessSpec] = None) -> RolloutRecord:
    """Closed-loop rollout of the plant under the receding-horizon controller."""
    success = success or SuccessSpec()
    dt = controller.config.dt
    n_steps = int(round(duration / dt))
    model, gait = plant.model, plant.gait
    t = t0_index * dt
    x = np.array(gait.path(t), dtype=float)
    phases = _PhaseMachine(gait, t)
    times, states, inputs = [], [], []
    events = []
    cons = list(constraints or [])
    con_names = tuple(f"{c.name}[{r}]" for c in cons for r in range(c.num_rows))
    con_values, violations = [], []
    kkts, alphas = [], []
    failures = 0
    outcome = "success"

    for step in range(n_steps):
        u_cmd, gain, diag = controller.step(t0_index + step, x)
        if diag["failed"]:
            failures += 1
            if controller.failures_in_a_row > success.max_consecutive_failures:
                outcome = "solver-failure"
        x_ref = getattr(controller, "last_reference", x)
        times.append(t)
        states.append(x.copy())
        kkts.append(diag["kkt"])
        alphas.append(diag["alpha"])

        # integrate one control period with feedback and event detection
        n_sub = max(1, int(round(dt / plant.substep)))
        h = dt / n_sub
        u_first = None
        for _ in range(n_sub):
            u = u_cmd + gain @ (x - x_ref)
            if u_first is None:
                u_first = u.copy()
            u_applied = u if plant.u_limits is None else np.clip(
                u, -plant.u_limits, plant.u_limits)
            ev = phases.next_event()
            psi_before = (np.max(plant.offset_guard(ev.transition, t, x))
                          if ev is not None else 1.0)
            x_new = _rk4_plant(model, phases.mode, t, x, u_applied, h)
            t_new = t + h
            if ev is not None:
                psi_after = np.max(plant.offset_guard(ev.transition, t_new, x_new))
                if psi_before > 0.0 >= psi_after:
                    t_ev, x_ev = _bisect_event(plant, phases.mode, ev.transition,
                                               t, x, u_applied, h)
                    x_plus, _, _ = evaluate_reset(model, ev.transition, t_ev, x_ev)
                    residual = float(np.max(np.abs(
                        plant.offset_guard(ev.transition, t_ev, x_ev))))
                    events.append((t_ev, ev.transition, residual))
                    phases.touchdown_realized(ev)
                    x_new = _rk4_plant(model, phases.mode, t_ev, x_plus,
                                       u_applied, t_new - t_ev)
            x, t = x_new, t_new
            phases.advance_time(t)
            if plant.noise_cov is not None:
                w = plant._rng.multivariate_normal(
                    np.zeros(model.nw), plant.noise_cov)
                x = x + model.gamma_flow @ w * math.sqrt(h)
            if not np.all(np.isfinite(x)):
                outcome = "fall"
                break
        inputs.append(u_first)
        if cons:
            h_all = np.concatenate([c.evaluate(states[-1], u_first) for c in cons])
            con_values.append(h_all)
            violations.append(h_all < -success.tol_band)
        if outcome != "success":
            break
        if not (success.z_min - success.tol_band <= x[2]
                <= success.z_max + success.tol_band):
            outcome = "constraint-violation"
            times.append(t)
            states.append(x.copy())
            inputs.append(u_first)
            kkts.append(math.nan)
            alphas.append(math.nan)
            if cons:
                h_all = np.concatenate([c.evaluate(x, u_first) for c in cons])
                con_values.append(h_all)
                violations.append(h_all < -success.tol_band)
            break

    if outcome == "success" and cons and violations:
        hard_rows = np.concatenate(
            [np.full(c.num_rows, not c.soft) for c in cons])
        if np.any(np.array(violations)[:, hard_rows]):
            outcome = "constraint-violation"

    return RolloutRecord(
        times=np.array(times), states=np.array(states),
        inputs=np.array(inputs), events=events,
        constraint_names=con_names,
        constraint_values=(np.array(con_values) if con_values else np.zeros((0, 0))),
        violations=(np.array(violations) if violations else
                    np.zeros((0, 0), dtype=bool)),
        step_kkt=np.array(kkts), step_alpha=np.array(alphas),
        solver_failures=failures, outcome=outcome)


def _bisect_event(plant, mode, transition, t_lo, x_lo, u, h, tol=1e-8):
    """Bisection on the offset guard's last component crossing within (t, t+h)."""
    lo_t, hi_t = t_lo, t_lo + h

    def psi(tt):
        x_t = _rk4_plant(plant.model, mode, t_lo, x_lo, u, tt - t_lo) \
            if tt > t_lo else x_lo
        return float(np.max(plant.offset_guard(transition, tt, x_t))), x_t

    while hi_t - lo_t > tol:
        mid = 0.5 * (lo_t + hi_t)
        val, _ = psi(mid)
        if val > 0.0:
            lo_t = mid
        else:
            hi_t = mid
    t_ev = 0.5 * (lo_t + hi_t)
    _, x_ev = psi(t_ev)
    return t_ev, x_ev


# ---------------------------------------------------------------------------
# experiment harnesses


@dataclass
class BipedExperiment:
    """Shared scenario description for the Monte-Carlo comparison.

    The default task puts the body-height floor just under the walk's
    natural dips so that unprotected controllers violate it under terrain
    estimation errors while the covariance-tightened ones keep clearance.
    """

    duration: float = 1.6
    offset_range: float = 0.04
    speed: float = 0.25
    n_steps: int = 30
    task: benchmarks.BipedTask = field(default_factory=lambda: benchmarks.BipedTask(
        z_min=0.9535, z_max=1.05, r_input=0.1, tighten_inputs=False))
    params: benchmarks.BipedParams = field(default_factory=benchmarks.mpc_biped_params)
    substep: float = 0.005
    success: SuccessSpec = field(default_factory=SuccessSpec)


def _build_biped_stack(config: MpcConfig, experiment: BipedExperiment):
    params = experiment.params
    gait = benchmarks.build_walk_gait(dt=config.dt, n_steps=experiment.n_steps,
                                      speed=experiment.speed, params=params,
                                      guard_cov=config.guard_cov)
    model = benchmarks.biped_model(gait)
    task = experiment.task

    def factory(t0_index):
        return benchmarks.biped_problem(gait, model, t0_index,
                                        config.horizon_nodes, config.dt, task)

    controller = MpcController(factory, config)
    return gait, model, task, controller, factory


def run_biped_rollout(config: MpcConfig, experiment: BipedExperiment,
                      offsets: dict) -> RolloutRecord:
    """One seeded closed-loop environment under the given variant.

    Terrain estimation errors act purely on the contact timing (the guard
    crossing); leg compression is measured from the realized contact, so the
    plant keeps the planned foothold geometry once a foot is planted.
    """
    gait, model, task, controller, factory = _build_biped_stack(config, experiment)
    plant = PlantSimulator(model=model, gait=gait, guard_offsets=offsets,
                           substep=experiment.substep, u_limits=task.u_max)
    prob0 = factory(0)
    spec = dataclasses.replace(experiment.success, z_min=task.z_min,
                               z_max=task.z_max)
    return simulate_closed_loop(controller, plant, experiment.duration,
                                t0_index=0, constraints=prob0.path_constraints,
                                success=spec)


def sample_offsets(seed: int, env_index: int, offset_range: float) -> dict:
    """Per-environment terrain estimation errors, uniform on +-offset_range."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, env_index)))
    return {
        "td-left": rng.uniform(-offset_range, offset_range, 1),
        "td-right": rng.uniform(-offset_range, offset_range, 1),
        "td-both": rng.uniform(-offset_range, offset_range, 2),
    }


def _mc_worker(args):
    config_kw, experiment_kw, seed, env_index = args
    config = MpcConfig(**config_kw)
    experiment = BipedExperiment(**experiment_kw)
    offsets = sample_offsets(seed, env_index, experiment.offset_range)
    record = run_biped_rollout(config, experiment, offsets)
    return env_index, _summarize_rollout(record)


def _summarize_rollout(record: RolloutRecord):
    return {
        "outcome": record.outcome,
        "violations": record.violations,
        "constraint_names": record.constraint_names,
        "mean_alpha": float(np.nanmean(record.step_alpha))
        if record.step_alpha.size else math.nan,
        "solver_failures": record.solver_failures,
        "n_events": len(record.events),
    }


@dataclass
class MonteCarloResult:
    variant: str
    n_envs: int
    success_rate: float
    outcomes: dict
    violation_frequency: dict        # constraint name -> per-step frequency array
    max_violation_frequency: dict
    mean_step_size: float


def monte_carlo_compare(configs, experiment: BipedExperiment, n_envs: int,
                        seed: int, threads: int = 1) -> list:
    """Seeded rollouts per variant over shared randomized environments."""
    if n_envs < 1:
        raise ValueError("n_envs must be at least 1")
    results = []
    for config in configs:
        config_kw = dataclasses.asdict(config)
        experiment_kw = dataclasses.asdict(experiment)
        experiment_kw["task"] = benchmarks.BipedTask(**experiment_kw["task"])
        experiment_kw["params"] = benchmarks.BipedParams(**experiment_kw["params"])
        experiment_kw["success"] = SuccessSpec(**experiment_kw["success"])
        jobs = [(config_kw, experiment_kw, seed, e) for e in range(n_envs)]
        if threads > 1:
            import multiprocessing as mp
            with mp.get_context("fork").Pool(threads) as pool:
                summaries = dict(pool.map(_mc_worker, jobs))
        else:
            summaries = dict(_mc_worker(job) for job in jobs)
        results.append(_aggregate(config.variant, n_envs, summaries))
    return results


def _aggregate(variant, n_envs, summaries) -> MonteCarloResult:
    """Per-step violation frequencies use the environments still alive at
    each step as the denominator (rollouts end early on failure)."""
    outcomes = {}
    alphas = []
    viol_sum = {}
    viol_count = {}
    row_names = None
    for e in range(n_envs):
        s = summaries[e]
        outcomes[s["outcome"]] = outcomes.get(s["outcome"], 0) + 1
        if not math.isnan(s["mean_alpha"]):
            alphas.append(s["mean_alpha"])
        v = s["violations"]
        row_names = s["constraint_names"]
        for step in range(v.shape[0] if v.size else 0):
            viol_sum.setdefault(step, np.zeros(v.shape[1]))
            viol_count.setdefault(step, 0)
            viol_sum[step] += v[step]
            viol_count[step] += 1
    freq = {}
    max_freq = {}
    if viol_sum and row_names:
        steps = sorted(viol_sum)
        mat = np.array([viol_sum[s] / max(viol_count[s], 1) for s in steps])
        base_names = sorted({name.split("[")[0] for name in row_names})
        for base in base_names:
            cols = [k for k, n in enumerate(row_names) if n.startswith(base + "[")]
            freq[base] = mat[:, cols].max(axis=1)
            max_freq[base] = float(np.max(freq[base])) if freq[base].size else 0.0
    return MonteCarloResult(
        variant=variant, n_envs=n_envs,
        success_rate=outcomes.get("success", 0) / n_envs,
        outcomes=outcomes, violation_frequency=freq,
        max_violation_frequency=max_freq,
        mean_step_size=float(np.mean(alphas)) if alphas else math.nan)


def calibrate_hmpc_margins(config: MpcConfig, experiment: BipedExperiment,
                           percentile: float = 90.0) -> dict:
    """Heuristic constraint margins from a GS-SMPC calibration solve.

    Solves one stochastic window offline and returns, per tightened
    constraint, the requested percentile of its backoff profile.
    """
    gs = dataclasses.replace(config, variant="gs-smpc")
    gait, model, task, controller, factory = _build_biped_stack(gs, experiment)
    problem = factory(0)
    options = gs.solve_options(max_iters=gs.warmup_iters, merit=True)
    state = transcribe(problem, np.array(gait.path(0.0)))
    for _ in range(gs.warmup_iters):
        iterate(state, options)
    per_name = {}
    from .ocp import _problem_stacks
    path_stack, event_stack = _problem_stacks(problem)
    for i, beta in enumerate(state.backoffs):
        names = (path_stack.names if i in problem.schedule.flow_nodes
                 else event_stack.names)
        for name, value in zip(names, beta):
            base = name.split("[")[0]
            per_name.setdefault(base, []).append(float(value))
    return {base: float(np.percentile(vals, percentile))
            for base, vals in per_name.items() if max(vals) > 0.0}


# ---------------------------------------------------------------------------
# covariance forecast experiment


@dataclass
class ForecastCell:
    motion: str
    method: str
    sweep_value: float
    terminal_diag: Optional[np.ndarray]
    terminal_trace: float
    error: str = ""


def covariance_forecast_experiment(motions, c_g_values, sigma_values,
                                   horizon_nodes: int = 75, dt: float = 0.02,
                                   t0_index: int = 8, step_at: float = 0.25,
                                   params=None, task=None) -> list:
    """Terminal-covariance table over motions, methods and parameter sweeps.

    For each motion the nominal trajectory optimization is solved once; the
    three propagation rules then run along that common trajectory so that the
    cells isolate the covariance update law. Per-cell failures are recorded,
    not raised.
    """
    from .ocp import covariance_pass, solve

    params = params or benchmarks.forecast_biped_params()
    task = task or benchmarks.forecast_biped_task()
    cells = []
    for motion in motions:
        gait = benchmarks.build_walk_gait(dt=dt, n_steps=14, params=params,
                                          motion=motion, step_at=step_at)
        model = benchmarks.biped_model(gait)
        prob = benchmarks.biped_problem(gait, model, t0_index, horizon_nodes,
                                        dt, task)
        x0 = np.array(gait.path(t0_index * dt), dtype=float)
        x0[2] = params.touchdown_height + 0.01
        nominal = SolveOptions(backoff_source="none", guard_cov_override=0.0,
                               w_flow_override=np.zeros((3, 3)), max_iters=150)
        traj, diag = solve(prob, nominal, x_init=x0)
        if not diag.converged:
            for method in ("a", "b", "c"):
                values = sigma_values if method == "c" else c_g_values
                for v in values:
                    cells.append(ForecastCell(motion, method, v, None, math.nan,
                                              error="nominal solve failed"))
            continue
        state = transcribe(prob, x0)
        state.states = traj.states.copy()
        state.inputs = [None if u is None else u.copy() for u in traj.inputs]
        state.gains = [None if k is None else k.copy() for k in traj.gains]

        def run_cell(method, value):
            if method == "a":
                opts = SolveOptions(jump_rule="saltation", backoff_source="none",
                                    guard_cov_override=value)
            elif method == "b":
                opts = SolveOptions(jump_rule="saltation-apriori",
                                    backoff_source="none",
                                    guard_cov_override=value)
            else:
                opts = SolveOptions(jump_rule="dynamics", backoff_source="none",
                                    guard_cov_override=0.0,
                                    w_jump_override=value * np.eye(3))
            try:
                covs, _, _ = covariance_pass(state, prob, opts)
                p = covs[-1]
                return ForecastCell(motion, method, value, np.diag(p).copy(),
                                    float(np.trace(p)))
            except SaltMpcError as exc:
                return ForecastCell(motion, method, value, None, math.nan,
                                    error=str(exc))

        for method in ("a", "b"):
            for v in c_g_values:
                cells.append(run_cell(method, v))
        for v in sigma_values:
            cells.append(run_cell("c", v))
    return cells


def match_baseline_sigma(cells, motion: str, target_trace: float):
    """Sigma for which method (c) matches a target terminal trace (affine fit)."""
    c_cells = [c for c in cells if c.motion == motion and c.method == "c"
               and not c.error]
    if len(c_cells) < 2:
        raise ValueError("need at least two successful method-c cells")
    c_cells.sort(key=lambda c: c.sweep_value)
    s0, s1 = c_cells[0], c_cells[-1]
    slope = (s1.terminal_trace - s0.terminal_trace) / (s1.sweep_value - s0.sweep_value)
    return s0.sweep_value + (target_trace - s0.terminal_trace) / slope


# ---------------------------------------------------------------------------
# timing


def benchmark_iterations(problem: OcpProblem, options: SolveOptions, x_init,
                         repetitions: int = 30, warm_iters: int = 10):
    """Wall-clock samples of single Newton-type iterations from a fixed state."""
    state = transcribe(problem, x_init)
    for _ in range(warm_iters):
        iterate(state, options)
    snapshot = copy.deepcopy(state)
    samples = []
    for _ in range(repetitions):
        work = copy.deepcopy(snapshot)
        start = time.perf_counter()
        iterate(work, options)
        samples.append(time.perf_counter() - start)
    return np.array(samples)
