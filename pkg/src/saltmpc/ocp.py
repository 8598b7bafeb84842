"""Stochastic/robust OCP transcription and the zero-order SQP solver.

The horizon is discretized by direct multiple shooting over a mode schedule.
Each Newton-type iteration evaluates derivatives, propagates covariances and
backoff terms forward (their sensitivities never enter the KKT system),
condenses inequality constraints into the stage costs via a primal-dual
interior point, and solves the resulting equality-constrained subproblem with
a Riccati recursion that also yields the feedback-gain trajectory.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import covariance as cov
from .errors import CovarianceError, EventError, NumericalError, ProblemError, ScheduleError
from .hybrid_model import HybridModel, discretize_flow, evaluate_guard, evaluate_reset
from .riccati import RiccatiStage, backward_forward
from .saltation import build_event_linearization, saltation_result


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ModeSchedule:
    """Node times, per-interval modes and the jump-node layout.

    Jump nodes j carry a transition id; the state jump occurs between j and
    j+1 at identical times. Flow nodes I and jump nodes J partition 0..N-1,
    with N the terminal node.
    """

    times: np.ndarray
    interval_modes: tuple
    jump_transitions: dict

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ScheduleError("schedule needs at least two nodes")
        n = times.size - 1
        if len(self.interval_modes) != n:
            raise ScheduleError(
                f"expected {n} interval modes, got {len(self.interval_modes)}")
        if np.any(np.diff(times) < 0.0):
            raise ScheduleError("node times must be non-decreasing")
        for j, name in self.jump_transitions.items():
            if not 0 <= j <= n - 1:
                raise ScheduleError(f"jump node {j} out of range")
            if abs(times[j + 1] - times[j]) > 1e-12 * (1.0 + abs(times[j])):
                raise ScheduleError(f"jump node {j} must satisfy t_j = t_j+1")
            if not isinstance(name, str):
                raise ScheduleError("jump transitions must be named by string id")
        for i in range(n):
            if i not in self.jump_transitions and times[i + 1] <= times[i]:
                raise ScheduleError(f"flow interval {i} has non-positive duration")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "interval_modes", tuple(self.interval_modes))
        object.__setattr__(self, "jump_transitions", dict(self.jump_transitions))

    @property
    def horizon_nodes(self) -> int:
        """Index N of the terminal node."""
        return self.times.size - 1

    @property
    def jump_nodes(self):
        return frozenset(self.jump_transitions)

    @property
    def flow_nodes(self) -> tuple:
        return tuple(i for i in range(self.horizon_nodes) if i not in self.jump_transitions)

    def dt(self, i: int) -> float:
        return float(self.times[i + 1] - self.times[i])


# ---------------------------------------------------------------------------
# costs and constraints


@dataclass(frozen=True)
class StageCost:
    """Quadratic tracking cost 1/2 |x - x_ref|_Q^2 + 1/2 |u - u_ref|_R^2."""

    q: np.ndarray
    r: np.ndarray
    x_ref: Callable[[float], np.ndarray]
    u_ref: Optional[Callable[[float], np.ndarray]] = None

    def expand(self, t, x, u):
        ex = x - np.asarray(self.x_ref(t), dtype=float)
        eu = u - (np.asarray(self.u_ref(t), dtype=float) if self.u_ref else np.zeros_like(u))
        val = 0.5 * float(ex @ self.q @ ex) + 0.5 * float(eu @ self.r @ eu)
        return val, self.q @ ex, self.r @ eu

    def hessians(self):
        return self.q, self.r


@dataclass(frozen=True)
class StateCost:
    """Quadratic state-only cost used at jump and terminal nodes."""

    q: np.ndarray
    x_ref: Callable[[float], np.ndarray]

    def expand(self, t, x):
        ex = x - np.asarray(self.x_ref(t), dtype=float)
        return 0.5 * float(ex @ self.q @ ex), self.q @ ex


@dataclass(frozen=True)
class LinearConstraint:
    """Affine rows h = cx x + cu u + d >= 0 with optional tightening.

    State-only rows (cu absent/zero) that carry a BackoffSpec must be soft;
    hard tightened state constraints make the tightened problem infeasible
    when the covariance grows.
    """

    name: str
    cx: np.ndarray
    d: np.ndarray
    cu: Optional[np.ndarray] = None
    soft: bool = False
    backoff: Optional[cov.BackoffSpec] = None

    def __post_init__(self):
        cx = np.atleast_2d(np.asarray(self.cx, dtype=float))
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if cx.shape[0] != d.size:
            raise ProblemError(f"constraint '{self.name}': row count mismatch")
        cu = None if self.cu is None else np.atleast_2d(np.asarray(self.cu, dtype=float))
        object.__setattr__(self, "cx", cx)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "cu", cu)

    @property
    def num_rows(self) -> int:
        return self.d.size

    @property
    def state_only(self) -> bool:
        return self.cu is None or not np.any(self.cu)

    def evaluate(self, x, u=None):
        h = self.cx @ x + self.d
        if self.cu is not None and u is not None:
            h = h + self.cu @ u
        return h


def input_box(name: str, lower, upper, nu: int, backoff=None, soft=False):
    """Box bounds on the input as stacked one-sided rows."""
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (nu,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (nu,))
    rows_cu, rows_d = [], []
    for k in range(nu):
        if np.isfinite(upper[k]):
            e = np.zeros(nu)
            e[k] = -1.0
            rows_cu.append(e)
            rows_d.append(upper[k])
        if np.isfinite(lower[k]):
            e = np.zeros(nu)
            e[k] = 1.0
            rows_cu.append(e)
            rows_d.append(-lower[k])
    cu = np.vstack(rows_cu)
    cx = np.zeros((cu.shape[0], 0))  # patched by problem to nx at validation
    return LinearConstraint(name=name, cx=cx, d=np.array(rows_d), cu=cu,
                            soft=soft, backoff=backoff)


# ---------------------------------------------------------------------------
# problem / state


@dataclass
class OcpProblem:
    """Transcribed stochastic OCP over a mode schedule."""

    model: HybridModel
    schedule: ModeSchedule
    stage_cost: StageCost
    terminal_cost: StateCost
    jump_cost: Optional[StateCost] = None
    path_constraints: list = field(default_factory=list)
    event_constraints: list = field(default_factory=list)
    u_guess: Optional[np.ndarray] = None

    def __post_init__(self):
        nx, nu = self.model.nx, self.model.nu
        for mode in self.schedule.interval_modes:
            self.model.flow(mode)
        for name in self.schedule.jump_transitions.values():
            self.model.transition(name)
        patched = []
        for con in self.path_constraints:
            if con.cx.shape[1] == 0:
                con = dataclasses.replace(con, cx=np.zeros((con.num_rows, nx)))
            if con.cx.shape[1] != nx or (con.cu is not None and con.cu.shape[1] != nu):
                raise ProblemError(f"constraint '{con.name}': dimension mismatch")
            if con.backoff is not None and con.state_only and not con.soft:
                raise ProblemError(
                    f"state-only tightened constraint '{con.name}' must be soft")
            patched.append(con)
        self.path_constraints = patched
        for con in self.event_constraints:
            if not con.state_only:
                raise ProblemError(f"event constraint '{con.name}' must be state-only")
            if con.cx.shape[1] != nx:
                raise ProblemError(f"constraint '{con.name}': dimension mismatch")
            if con.backoff is not None and not con.soft:
                raise ProblemError(
                    f"state-only tightened constraint '{con.name}' must be soft")
        q, r = self.stage_cost.hessians()
        for mat, what in ((q, "stage state"), (r, "stage input"),
                          (self.terminal_cost.q, "terminal")):
            mat = np.asarray(mat)
            if mat.size and float(np.min(np.linalg.eigvalsh(0.5 * (mat + mat.T)))) < -1e-10:
                raise ProblemError(f"{what} cost hessian must be PSD")


@dataclass
class SolveOptions:
    """Algorithm configuration; uncertainty overrides allow zeroing or
    sweeping the model's noise terms without rebuilding the problem."""

    max_iters: int = 50
    kkt_tol: float = 1e-6
    mu: float = 1e-3
    mu_schedule: str = "fixed"            # "fixed" | "reduce"
    mu_min: float = 1e-8
    soft_weight: float = 1e-3
    soft_delta: float = 1e-4
    tau: float = 0.995
    alpha_min: float = 1e-8
    merit_backtracking: bool = True
    jump_rule: str = "saltation"          # "saltation" | "saltation-apriori" | "dynamics"
    backoff_source: str = "covariance"    # "covariance" | "margins" | "none"
    margins: dict = field(default_factory=dict)
    compute_kkt: bool = True
    # p0: None (zeros), a full matrix, a scalar variance, or a
    # (position_variance, velocity_variance) pair splitting the state in
    # halves; w overrides: matrix or scalar variance times identity
    p0: object = None
    guard_cov_override: Optional[float] = None
    w_flow_override: object = None
    w_jump_override: object = None
    # apply the EKF-like contraction also at flow nodes, measuring the most
    # recent event's guard; off by default
    posterior_at_flow_nodes: bool = False
    transversality_eps: float = 1e-8


@dataclass
class SolverState:
    """Primal/dual iterates plus the covariance cache of one solve."""

    problem: OcpProblem
    x_init: np.ndarray
    states: np.ndarray                    # (N+1, nx)
    inputs: list                          # per node; None at jump/terminal nodes
    gains: list                           # per node; None off flow nodes
    lambdas: np.ndarray                   # (N+1, nx)
    nus: dict                             # jump node -> dual vector
    slacks: Optional[list] = None         # per node arrays (hard rows)
    duals: Optional[list] = None
    mu: float = 1e-3
    covs: Optional[list] = None
    backoffs: Optional[list] = None       # per node arrays (all rows)
    kkt_history: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    iterations: int = 0

    def input_at(self, n: int) -> np.ndarray:
        u = self.inputs[n]
        if u is None:
            raise ScheduleError(f"node {n} carries no input")
        return u

    @property
    def num_state_nodes(self) -> int:
        return self.states.shape[0]

    @property
    def num_input_nodes(self) -> int:
        return sum(1 for u in self.inputs if u is not None)


@dataclass
class BeliefTrajectory:
    """Solution bundle: per-node time, mean, input, covariance, gain."""

    schedule: ModeSchedule
    states: np.ndarray
    inputs: list
    covariances: list
    gains: list

    def input_at(self, n: int) -> np.ndarray:
        u = self.inputs[n]
        if u is None:
            raise ScheduleError(f"node {n} carries no input")
        return u


@dataclass
class SolveDiagnostics:
    converged: bool = False
    iterations: int = 0
    kkt_residuals: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    skipped_guards: int = 0
    clipped_backoffs: int = 0
    degraded_jumps: int = 0
    step_failures: int = 0
    regularization: float = 0.0
    message: str = ""


def transcribe(problem: OcpProblem, x_init, initial_guess=None) -> SolverState:
    """Allocate the solver iterate for a problem.

    States come from the guess (a BeliefTrajectory or an (N+1, nx) array) or
    a constant hold of the initial state; inputs default to the problem's
    input guess.
    """
    sched = problem.schedule
    n = sched.horizon_nodes
    if n < 1:
        raise ProblemError("zero-horizon problems are rejected")
    nx, nu = problem.model.nx, problem.model.nu
    x_init = np.asarray(x_init, dtype=float).reshape(nx)
    states = np.tile(x_init, (n + 1, 1))
    u_hold = (np.zeros(nu) if problem.u_guess is None
              else np.asarray(problem.u_guess, dtype=float).reshape(nu))
    inputs = [u_hold.copy() if i in set(sched.flow_nodes) else None for i in range(n)]
    inputs.append(None)
    gains = [np.zeros((nu, nx)) if i in set(sched.flow_nodes) else None for i in range(n)]
    gains.append(None)
    if initial_guess is not None:
        guess_states = getattr(initial_guess, "states", initial_guess)
        guess_states = np.asarray(guess_states, dtype=float)
        if guess_states.shape != (n + 1, nx):
            raise ProblemError(
                f"initial guess shape {guess_states.shape} does not match {(n + 1, nx)}")
        states = guess_states.copy()
        guess_inputs = getattr(initial_guess, "inputs", None)
        if guess_inputs is not None:
            for i in sched.flow_nodes:
                if guess_inputs[i] is not None:
                    inputs[i] = np.asarray(guess_inputs[i], dtype=float).reshape(nu)
        guess_gains = getattr(initial_guess, "gains", None)
        if guess_gains is not None:
            for i in sched.flow_nodes:
                if guess_gains[i] is not None:
                    gains[i] = np.asarray(guess_gains[i], dtype=float).reshape(nu, nx)
    return SolverState(
        problem=problem, x_init=x_init, states=states, inputs=inputs,
        gains=gains, lambdas=np.zeros((n + 1, nx)),
        nus={j: np.zeros(problem.model.transition(tr).guard.ng)
             for j, tr in sched.jump_transitions.items()})


# ---------------------------------------------------------------------------
# per-iteration machinery


@dataclass
class _NodeEval:
    """Values and derivatives of one node at the current iterate."""

    kind: str
    t: float
    cost_val: float
    qx: np.ndarray
    qxx: np.ndarray
    qu: Optional[np.ndarray] = None
    quu: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    defect: Optional[np.ndarray] = None
    gsw: Optional[np.ndarray] = None
    gsw_res: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None        # stacked constraint rows
    jx: Optional[np.ndarray] = None
    ju: Optional[np.ndarray] = None
    soft_mask: Optional[np.ndarray] = None
    gammas: Optional[np.ndarray] = None
    clips: Optional[np.ndarray] = None
    tightened: Optional[np.ndarray] = None
    row_names: tuple = ()


class _ConstraintStack:
    """Stacked rows of a constraint list; jacobians are constant, only the
    values depend on the iterate."""

    def __init__(self, cons, nx, nu):
        jx_rows, ju_rows, d_rows = [], [], []
        soft, gammas, clips, tightened, names = [], [], [], [], []
        for con in cons:
            jx_rows.append(con.cx)
            ju_rows.append(con.cu if con.cu is not None
                           else np.zeros((con.num_rows, nu)))
            d_rows.append(con.d)
            soft.extend([con.soft] * con.num_rows)
            if con.backoff is not None:
                gammas.extend([con.backoff.gamma] * con.num_rows)
                clips.extend([con.backoff.clip_max] * con.num_rows)
                tightened.extend([True] * con.num_rows)
            else:
                gammas.extend([0.0] * con.num_rows)
                clips.extend([math.inf] * con.num_rows)
                tightened.extend([False] * con.num_rows)
            names.extend([f"{con.name}[{r}]" for r in range(con.num_rows)])
        if jx_rows:
            self.jx = np.vstack(jx_rows)
            self.ju = np.vstack(ju_rows)
            self.d = np.concatenate(d_rows)
        else:
            self.jx = np.zeros((0, nx))
            self.ju = np.zeros((0, nu))
            self.d = np.zeros(0)
        self.soft = np.array(soft, dtype=bool)
        self.gammas = np.array(gammas)
        self.clips = np.array(clips)
        self.tightened = np.array(tightened, dtype=bool)
        self.names = tuple(names)
        self.has_ju = bool(np.any(self.ju))

    def values(self, x, u=None):
        h = self.jx @ x + self.d
        if u is not None and self.has_ju:
            h = h + self.ju @ u
        return h


def _problem_stacks(prob):
    stacks = prob.__dict__.get("_stacks")
    if stacks is None:
        nx, nu = prob.model.nx, prob.model.nu
        stacks = (_ConstraintStack(prob.path_constraints, nx, nu),
                  _ConstraintStack(prob.event_constraints, nx, nu))
        prob.__dict__["_stacks"] = stacks
    return stacks


def _evaluate_nodes(state: SolverState) -> list:
    prob = state.problem
    model, sched = prob.model, prob.schedule
    nx = model.nx
    n = sched.horizon_nodes
    evals = []
    q_stage, r_stage = prob.stage_cost.hessians()
    path_stack, event_stack = _problem_stacks(prob)
    for i in range(n + 1):
        t = float(sched.times[i])
        x = state.states[i]
        if i == n:
            val, qx = prob.terminal_cost.expand(t, x)
            st = event_stack
            evals.append(_NodeEval(
                kind="terminal", t=t, cost_val=val, qx=qx, qxx=prob.terminal_cost.q,
                h=st.values(x), jx=st.jx, ju=None, soft_mask=st.soft,
                gammas=st.gammas, clips=st.clips, tightened=st.tightened,
                row_names=st.names))
        elif i in sched.jump_transitions:
            tr_name = sched.jump_transitions[i]
            x_plus, drdx, _ = evaluate_reset(model, tr_name, t, x)
            g_val, dgdx, _ = evaluate_guard(model, tr_name, t, x)
            if prob.jump_cost is not None:
                val, qx = prob.jump_cost.expand(t, x)
                qxx = prob.jump_cost.q
            else:
                val, qx, qxx = 0.0, np.zeros(nx), np.zeros((nx, nx))
            st = event_stack
            evals.append(_NodeEval(
                kind="jump", t=t, cost_val=val, qx=qx, qxx=qxx,
                a=drdx, defect=x_plus - state.states[i + 1],
                gsw=dgdx, gsw_res=g_val,
                h=st.values(x), jx=st.jx, ju=None, soft_mask=st.soft,
                gammas=st.gammas, clips=st.clips, tightened=st.tightened,
                row_names=st.names))
        else:
            u = state.inputs[i]
            x_next, a, b, _ = discretize_flow(
                model, sched.interval_modes[i], t, x, u, sched.dt(i))
            val, qx, qu = prob.stage_cost.expand(t, x, u)
            st = path_stack
            evals.append(_NodeEval(
                kind="flow", t=t, cost_val=val, qx=qx, qxx=q_stage, qu=qu, quu=r_stage,
                a=a, b=b, defect=x_next - state.states[i + 1],
                h=st.values(x, u), jx=st.jx, ju=st.ju, soft_mask=st.soft,
                gammas=st.gammas, clips=st.clips, tightened=st.tightened,
                row_names=st.names))
    return evals


def covariance_pass(state: SolverState, problem: OcpProblem,
                    options: SolveOptions, evals: Optional[list] = None):
    """Forward covariance sweep and backoff computation.

    Uses the previous iteration's gains at flow nodes and the configured jump
    rule at jump nodes. Returns (covs, backoffs, info) where backoffs align
    row-wise with each node's stacked constraints. The sensitivities of this
    pass never enter the KKT system.
    """
    if evals is None:
        evals = _evaluate_nodes(state)
    model, sched = problem.model, problem.schedule
    n = sched.horizon_nodes
    nx = model.nx
    covs = [cov.check_covariance(_materialize_p0(options.p0, nx),
                                 "initial covariance")]
    w_flow = _materialize_w(options.w_flow_override, model.noise_cov, model.nw)
    w_jump = _materialize_w(options.w_jump_override, model.noise_cov, model.nw)
    skipped = 0
    degraded = 0
    jump_opts = cov.JumpUpdateOptions(
        posterior=(options.jump_rule == "saltation"),
        transversality_eps=options.transversality_eps)
    last_jump = None
    for i in range(n):
        ev = evals[i]
        if ev.kind == "flow":
            p_next = cov.propagate_flow(covs[i], ev.a, ev.b, state.gains[i],
                                        model.gamma_flow, w_flow)
            if options.posterior_at_flow_nodes and last_jump is not None:
                from .hybrid_model import evaluate_guard
                tr = sched.jump_transitions[last_jump]
                _, dgdx, _ = evaluate_guard(model, tr, float(sched.times[i + 1]),
                                            state.states[i + 1])
                g_cov = model.transition(tr).guard.guard_cov
                if options.guard_cov_override is not None:
                    g_cov = np.full(g_cov.shape, options.guard_cov_override)
                if np.any(g_cov > 0.0):
                    _, p_next = cov.posterior_update(p_next, dgdx, g_cov)
        else:
            last_jump = i
            if options.jump_rule == "dynamics":
                p_next = cov.propagate_jump_baseline(covs[i], ev.a,
                                                     model.gamma_jump, w_jump)
            else:
                try:
                    lin = build_event_linearization(model, sched, state, i)
                except ScheduleError as exc:
                    raise ScheduleError(f"covariance pass at node {i}: {exc}") from exc
                if options.guard_cov_override is not None:
                    lin = dataclasses.replace(
                        lin, guard_cov=np.full(lin.ng, options.guard_cov_override))
                results = saltation_result(lin, eps=options.transversality_eps)
                skipped += results.num_skipped
                if not results.transversal_components:
                    # grazing iterate: degrade to the reset-only propagation
                    # for this iteration and surface the count
                    degraded += 1
                    p_next = cov.propagate_jump_baseline(
                        covs[i], ev.a, model.gamma_jump, np.zeros_like(w_jump))
                else:
                    try:
                        p_hat = cov.propagate_jump_apriori(covs[i], results,
                                                           lin.guard_cov)
                        if jump_opts.posterior:
                            _, p_next = cov.posterior_update(p_hat, lin.dgdx,
                                                             lin.guard_cov)
                        else:
                            p_next = p_hat
                    except (EventError, CovarianceError, NumericalError) as exc:
                        raise type(exc)(f"covariance pass at node {i}: {exc}") from exc
        covs.append(p_next)

    clipped = 0
    backoffs = []
    for i, ev in enumerate(evals):
        nrows = ev.h.size if ev.h is not None else 0
        beta = np.zeros(nrows)
        for r in range(nrows):
            if not ev.tightened[r]:
                continue
            if options.backoff_source == "none":
                continue
            if options.backoff_source == "margins":
                base = ev.row_names[r].split("[")[0]
                beta[r] = float(options.margins.get(base, 0.0))
                continue
            if ev.kind == "flow":
                val = cov.backoff_flow(covs[i], state.gains[i], ev.jx[r], ev.ju[r],
                                       ev.gammas[r], ev.clips[r])
            else:
                val = cov.backoff_jump(covs[i], ev.jx[r], ev.gammas[r], ev.clips[r])
            if val >= ev.clips[r]:
                clipped += 1
            beta[r] = val
        backoffs.append(beta)
    return covs, backoffs, {"skipped_guards": skipped, "clipped_backoffs": clipped,
                            "degraded_jumps": degraded}


def _materialize_p0(p0, nx):
    if p0 is None:
        return np.zeros((nx, nx))
    if np.isscalar(p0):
        return float(p0) * np.eye(nx)
    if isinstance(p0, tuple):
        pos_var, vel_var = p0
        half = nx // 2
        return np.diag([float(pos_var)] * half + [float(vel_var)] * (nx - half))
    return np.asarray(p0, dtype=float)


def _materialize_w(override, default, nw):
    if override is None:
        return default
    if np.isscalar(override):
        return float(override) * np.eye(nw)
    return np.asarray(override, dtype=float)


def _relaxed_barrier_terms(xi: np.ndarray, weight: float, delta: float):
    """Gradient/curvature factors of the relaxed log barrier at values xi.

    Above delta this is the exact log barrier; below, its quadratic
    extrapolation keeps the penalty defined for violated constraints.
    """
    b1 = np.empty_like(xi)
    b2 = np.empty_like(xi)
    above = xi > delta
    b1[above] = -weight / xi[above]
    b2[above] = weight / xi[above] ** 2
    b1[~above] = weight * (xi[~above] - 2.0 * delta) / delta ** 2
    b2[~above] = weight / delta ** 2
    return b1, b2


def _relaxed_barrier_value(xi: np.ndarray, weight: float, delta: float) -> float:
    above = xi > delta
    val = -weight * np.sum(np.log(xi[above]))
    xi_b = xi[~above]
    val += float(np.sum(weight * (0.5 * ((xi_b - 2.0 * delta) / delta) ** 2
                                  - 0.5 - math.log(delta))))
    return float(val)


def interior_point_condense(state: SolverState, evals: list, backoffs: list,
                            options: SolveOptions) -> list:
    """Fold inequality rows into stage-wise quadratic data (RiccatiStage list).

    Hard rows contribute primal-dual barrier terms built from the current
    slacks/duals; soft rows contribute relaxed-barrier penalties. The
    tightened value of every row is h - beta.
    """
    stages = []
    nx = state.problem.model.nx
    for i, ev in enumerate(evals):
        qxx = np.array(ev.qxx, dtype=float)
        qx = np.array(ev.qx, dtype=float)
        quu = np.array(ev.quu, dtype=float) if ev.quu is not None else None
        qu = np.array(ev.qu, dtype=float) if ev.qu is not None else None
        qxu = np.zeros((nx, quu.shape[0])) if quu is not None else None
        nrows = ev.h.size
        if nrows:
            xi = ev.h - backoffs[i]
            soft = ev.soft_mask
            if np.any(soft):
                b1, b2 = _relaxed_barrier_terms(xi[soft], options.soft_weight,
                                                options.soft_delta)
                jx_s = ev.jx[soft]
                qx += jx_s.T @ b1
                qxx = qxx + jx_s.T @ (b2[:, None] * jx_s)
                if ev.kind == "flow" and np.any(ev.ju[soft]):
                    ju_s = ev.ju[soft]
                    qu += ju_s.T @ b1
                    quu = quu + ju_s.T @ (b2[:, None] * ju_s)
                    qxu = qxu + jx_s.T @ (b2[:, None] * ju_s)
            hard = ~soft
            if np.any(hard):
                s = state.slacks[i]
                z = state.duals[i]
                if np.any(s <= 0.0) or np.any(z <= 0.0):
                    raise NumericalError(
                        f"non-positive slack/dual at node {i}; step-size bug")
                e_p = xi[hard] - s
                sigma = z / s
                grad_fac = -options.mu / s + sigma * e_p
                jx_h = ev.jx[hard]
                qx += jx_h.T @ grad_fac
                qxx = qxx + jx_h.T @ (sigma[:, None] * jx_h)
                if ev.kind == "flow":
                    ju_h = ev.ju[hard]
                    if np.any(ju_h):
                        qu += ju_h.T @ grad_fac
                        quu = quu + ju_h.T @ (sigma[:, None] * ju_h)
                        qxu = qxu + jx_h.T @ (sigma[:, None] * ju_h)
        stages.append(RiccatiStage(
            kind=ev.kind, qxx=qxx, qx=qx, a=ev.a, b=ev.b, c=ev.defect,
            quu=quu, qu=qu, qxu=qxu, gsw=ev.gsw, gsw_res=ev.gsw_res))
    return stages


def _init_slacks(state: SolverState, evals: list, backoffs: list, s_min=1e-4):
    slacks, duals = [], []
    for i, ev in enumerate(evals):
        hard = ~ev.soft_mask if ev.h is not None else np.zeros(0, dtype=bool)
        xi = (ev.h - backoffs[i])[hard] if ev.h is not None else np.zeros(0)
        s = np.maximum(xi, s_min)
        slacks.append(s)
        duals.append(np.where(s > 0, state.mu / s, 1.0))
    state.slacks = slacks
    state.duals = duals


def line_search(state: SolverState, evals: list, backoffs: list, sol,
                options: SolveOptions):
    """Step size from the fraction-to-boundary rule plus optional merit
    backtracking on an l1 penalty of the equality residuals."""
    alpha = 1.0
    ds_all, dz_all = [], []
    for i, ev in enumerate(evals):
        hard = ~ev.soft_mask
        if not np.any(hard):
            ds_all.append(np.zeros(0))
            dz_all.append(np.zeros(0))
            continue
        xi = ev.h - backoffs[i]
        s, z = state.slacks[i], state.duals[i]
        jw = ev.jx[hard] @ sol.dxs[i]
        if ev.kind == "flow":
            jw = jw + ev.ju[hard] @ sol.dus[i]
        e_p = xi[hard] - s
        ds = jw + e_p
        dz = (options.mu - s * z - z * ds) / s
        ds_all.append(ds)
        dz_all.append(dz)
        for vec, dvec in ((s, ds), (z, dz)):
            neg = dvec < 0.0
            if np.any(neg):
                bound = float(np.min(-options.tau * vec[neg] / dvec[neg]))
                alpha = min(alpha, bound)

    step_inf = float(np.max(np.abs(sol.dxs)))
    for du in sol.dus:
        if du is not None and du.size:
            step_inf = max(step_inf, float(np.max(np.abs(du))))
    scale = 1.0 + float(np.max(np.abs(state.states)))
    if options.merit_backtracking and step_inf > 1e-4 * scale:
        rho = 10.0 * max(1.0, float(np.max(np.abs(state.lambdas))) if state.lambdas.size else 1.0)
        merit0 = _merit(state, state.states, state.inputs, state.slacks, options, rho)
        accepted = False
        trial = alpha
        while trial >= options.alpha_min:
            xs_t = state.states + trial * sol.dxs
            us_t = [None if u is None else u + trial * sol.dus[i]
                    for i, u in enumerate(state.inputs)]
            s_t = [s + trial * ds for s, ds in zip(state.slacks, ds_all)]
            if all(np.all(s > 0.0) for s in s_t):
                merit_t = _merit(state, xs_t, us_t, s_t, options, rho)
                if merit_t <= merit0 + 1e-12 * max(1.0, abs(merit0)):
                    accepted = True
                    break
            trial *= 0.5
        alpha = trial if accepted else 0.0
    return alpha, ds_all, dz_all


def _merit(state: SolverState, xs, us, slacks, options: SolveOptions, rho: float):
    prob = state.problem
    model, sched = prob.model, prob.schedule
    n = sched.horizon_nodes
    path_stack, event_stack = _problem_stacks(prob)
    total = 0.0
    eq_l1 = float(np.sum(np.abs(state.x_init - xs[0])))
    for i in range(n + 1):
        t = float(sched.times[i])
        x = xs[i]
        if i == n:
            val, _ = prob.terminal_cost.expand(t, x)
            stack, u_node = event_stack, None
        elif i in sched.jump_transitions:
            tr = sched.jump_transitions[i]
            x_plus, _, _ = evaluate_reset(model, tr, t, x)
            g_val, _, _ = evaluate_guard(model, tr, t, x)
            eq_l1 += float(np.sum(np.abs(x_plus - xs[i + 1]))) + float(np.sum(np.abs(g_val)))
            if prob.jump_cost is not None:
                val, _ = prob.jump_cost.expand(t, x)
            else:
                val = 0.0
            stack, u_node = event_stack, None
        else:
            u = us[i]
            x_next, _, _, _ = discretize_flow(model, sched.interval_modes[i], t, x, u,
                                              sched.dt(i))
            eq_l1 += float(np.sum(np.abs(x_next - xs[i + 1])))
            val, _, _ = prob.stage_cost.expand(t, x, u)
            stack, u_node = path_stack, u
        total += val
        if stack.d.size:
            xi = stack.values(x, u_node) - state.backoffs[i]
            soft = stack.soft
            if np.any(soft):
                total += _relaxed_barrier_value(xi[soft], options.soft_weight,
                                                options.soft_delta)
            s = slacks[i]
            if s.size:
                total += -options.mu * float(np.sum(np.log(s)))
                eq_l1 += float(np.sum(np.abs(xi[~soft] - s)))
    return total + rho * eq_l1


def kkt_residual(state: SolverState, evals: list, backoffs: list,
                 options: SolveOptions) -> float:
    """Infinity norm of the perturbed KKT system at the current iterate."""
    prob = state.problem
    n = prob.schedule.horizon_nodes
    res = [float(np.max(np.abs(state.x_init - state.states[0])))]
    for i, ev in enumerate(evals):
        grad_x = np.array(ev.qx)
        nrows = ev.h.size
        if nrows:
            xi = ev.h - backoffs[i]
            soft = ev.soft_mask
            if np.any(soft):
                b1, _ = _relaxed_barrier_terms(xi[soft], options.soft_weight,
                                               options.soft_delta)
                grad_x += ev.jx[soft].T @ b1
            hard = ~soft
            if np.any(hard):
                z = state.duals[i]
                grad_x -= ev.jx[hard].T @ z
                res.append(float(np.max(np.abs(state.slacks[i] * z - options.mu))))
                res.append(float(np.max(np.abs(xi[hard] - state.slacks[i]))))
        if ev.kind == "jump":
            grad_x += ev.gsw.T @ state.nus[i]
            res.append(float(np.max(np.abs(ev.gsw_res))))
        if i < n:
            grad_x += ev.a.T @ state.lambdas[i + 1]
            res.append(float(np.max(np.abs(ev.defect))))
        grad_x -= state.lambdas[i]
        res.append(float(np.max(np.abs(grad_x))))
        if ev.kind == "flow":
            grad_u = np.array(ev.qu)
            if nrows:
                xi = ev.h - backoffs[i]
                soft = ev.soft_mask
                if np.any(soft):
                    b1, _ = _relaxed_barrier_terms(xi[soft], options.soft_weight,
                                                   options.soft_delta)
                    grad_u += ev.ju[soft].T @ b1
                hard = ~soft
                if np.any(hard):
                    grad_u -= ev.ju[hard].T @ state.duals[i]
            grad_u += ev.b.T @ state.lambdas[i + 1]
            res.append(float(np.max(np.abs(grad_u))))
    return max(res)


def iterate(state: SolverState, options: SolveOptions):
    """One Newton-type iteration (Algorithm lines 3-10). Returns info dict."""
    evals = _evaluate_nodes(state)
    covs, backoffs, cov_info = covariance_pass(state, state.problem, options, evals)
    state.covs = covs
    state.backoffs = backoffs
    if state.slacks is None:
        _init_slacks(state, evals, backoffs)
    kkt = (kkt_residual(state, evals, backoffs, options)
           if options.compute_kkt else math.nan)
    stages = interior_point_condense(state, evals, backoffs, options)
    dx0 = state.x_init - state.states[0]
    sol = backward_forward(stages, dx0)
    alpha, ds_all, dz_all = line_search(state, evals, backoffs, sol, options)
    step_failed = alpha <= options.alpha_min
    if not step_failed:
        state.states = state.states + alpha * sol.dxs
        for i in state.problem.schedule.flow_nodes:
            state.inputs[i] = state.inputs[i] + alpha * sol.dus[i]
            state.gains[i] = sol.gains[i]
        for i in range(len(evals)):
            if state.slacks[i].size:
                state.slacks[i] = state.slacks[i] + alpha * ds_all[i]
                state.duals[i] = state.duals[i] + alpha * dz_all[i]
        state.lambdas = (1.0 - alpha) * state.lambdas + alpha * sol.lambdas
        for j, sl in sol.nu_slices.items():
            state.nus[j] = (1.0 - alpha) * state.nus[j] + alpha * sol.nu[sl]
    state.kkt_history.append(kkt)
    state.step_sizes.append(alpha)
    state.iterations += 1
    return {
        "kkt": kkt, "alpha": alpha, "step_failed": step_failed,
        "regularization": sol.regularization, **cov_info}


def solve(problem: OcpProblem, options: Optional[SolveOptions] = None,
          x_init=None, initial_guess=None, state: Optional[SolverState] = None):
    """Run the zero-order stochastic/robust solver to convergence.

    Returns (BeliefTrajectory, SolveDiagnostics). Non-convergence within
    max_iters returns the best iterate flagged unconverged rather than
    raising.
    """
    options = options or SolveOptions()
    if state is None:
        if x_init is None:
            raise ProblemError("either a state or an initial state is required")
        state = transcribe(problem, x_init, initial_guess)
    state.mu = options.mu
    diag = SolveDiagnostics()
    mu_current = options.mu
    for _ in range(options.max_iters):
        opts = dataclasses.replace(options, mu=mu_current)
        state.mu = mu_current
        info = iterate(state, opts)
        diag.kkt_residuals.append(info["kkt"])
        diag.step_sizes.append(info["alpha"])
        diag.skipped_guards += info["skipped_guards"]
        diag.clipped_backoffs += info["clipped_backoffs"]
        diag.degraded_jumps += info["degraded_jumps"]
        diag.regularization = max(diag.regularization, info["regularization"])
        if info["step_failed"]:
            diag.step_failures += 1
        diag.iterations += 1
        if info["kkt"] < options.kkt_tol:
            if options.mu_schedule == "reduce" and mu_current > options.mu_min:
                mu_current = max(mu_current * 0.1, options.mu_min)
                continue
            diag.converged = True
            break
        if options.mu_schedule == "reduce" and info["kkt"] < 10.0 * mu_current:
            mu_current = max(mu_current * 0.1, options.mu_min)
    else:
        diag.message = "max iterations reached"
    trajectory = BeliefTrajectory(
        schedule=problem.schedule, states=state.states.copy(),
        inputs=[None if u is None else u.copy() for u in state.inputs],
        covariances=[p.copy() for p in (state.covs or [])],
        gains=[None if k is None else k.copy() for k in state.gains])
    return trajectory, diag
