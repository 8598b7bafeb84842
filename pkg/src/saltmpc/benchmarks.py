"""Built-in desk-scale benchmark systems and gait construction.

Three systems cover every code path of the solver and covariance machinery:

* ``bouncing-mass``: 1D mass under gravity with a restitution reset, the
  classic state-jump system (ng = 1, non-identity reset).
* ``double-integrator``: linear system with a synthetic guard, used by the
  solver unit tests.
* ``planar-biped``: 3D point mass on spring-damper legs walking over
  piecewise-flat terrain. Resets are the identity but the vector field
  switches with the contact set, so saltation matrices are non-trivial.
  Touchdown guards measure body height against per-event targets; a hop
  pattern lands both feet simultaneously (ng = 2).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .covariance import BackoffSpec
from .errors import ModelError
from .hybrid_model import FlowMap, GuardMap, HybridModel, ResetMap, Transition, identity_reset
from .ocp import LinearConstraint, ModeSchedule, OcpProblem, StageCost, StateCost, input_box


# ---------------------------------------------------------------------------
# bouncing mass


def bouncing_mass_model(gravity: float = 9.81, restitution: float = 0.5,
                        guard_cov: float = 0.0, noise_w: float = 0.0) -> HybridModel:
    """1D bouncing mass: x = (height, velocity), u = vertical thrust."""

    def flow(t, x, u):
        return np.array([x[1], -gravity + u[0]])

    flow_map = FlowMap(
        f=flow,
        dfdx=lambda t, x, u: np.array([[0.0, 1.0], [0.0, 0.0]]),
        dfdu=lambda t, x, u: np.array([[0.0], [1.0]]))
    guard = GuardMap(
        g=lambda t, x: np.array([x[0]]),
        ng=1,
        dgdx=lambda t, x: np.array([[1.0, 0.0]]),
        dgdt=lambda t, x: np.array([0.0]),
        guard_cov=np.array([guard_cov]))
    reset = ResetMap(
        r=lambda t, x: np.array([x[0], -restitution * x[1]]),
        drdx=lambda t, x: np.array([[1.0, 0.0], [0.0, -restitution]]),
        drdt=lambda t, x: np.zeros(2))
    return HybridModel(
        nx=2, nu=1, nw=1,
        flows=(flow_map,),
        transitions={"bounce": Transition(guard=guard, reset=reset)},
        gamma_flow=np.array([[0.0], [1.0]]),
        gamma_jump=np.array([[0.0], [1.0]]),
        noise_cov=np.array([[noise_w]]),
        name="bouncing-mass")


# ---------------------------------------------------------------------------
# double integrator


def double_integrator_model(switch_position: float = 1.0, guard_cov: float = 0.0,
                            noise_w: float = 0.0) -> HybridModel:
    """Double integrator with a synthetic position guard and identity reset."""

    flow_map = FlowMap(
        f=lambda t, x, u: np.array([x[1], u[0]]),
        dfdx=lambda t, x, u: np.array([[0.0, 1.0], [0.0, 0.0]]),
        dfdu=lambda t, x, u: np.array([[0.0], [1.0]]))
    guard = GuardMap(
        g=lambda t, x: np.array([switch_position - x[0]]),
        ng=1,
        dgdx=lambda t, x: np.array([[-1.0, 0.0]]),
        dgdt=lambda t, x: np.array([0.0]),
        guard_cov=np.array([guard_cov]))
    return HybridModel(
        nx=2, nu=1, nw=1,
        flows=(flow_map, flow_map),
        transitions={"switch": Transition(guard=guard, reset=identity_reset())},
        gamma_flow=np.array([[0.0], [1.0]]),
        gamma_jump=np.array([[0.0], [1.0]]),
        noise_cov=np.array([[noise_w]]),
        name="double-integrator")


# ---------------------------------------------------------------------------
# planar biped: gait plan


MODE_DOUBLE = 0
MODE_LEFT = 1
MODE_RIGHT = 2
MODE_FLIGHT = 3


@dataclass(frozen=True)
class FootEpisode:
    foot: str
    position: np.ndarray       # foothold (x, y, z) in world frame
    start: float               # touchdown time
    end: float                 # liftoff time


@dataclass(frozen=True)
class GaitEvent:
    time: float
    transition: str            # "td-left" | "td-right" | "td-both"
    targets: np.ndarray        # terrain height per guard component
    post_mode: int


@dataclass(frozen=True)
class BipedParams:
    mass: float = 1.0
    gravity: float = 9.81
    stiffness: float = 180.0
    damping: float = 12.0
    rest_length: float = 1.0
    touchdown_height: float = 0.96    # body height above the foothold at touchdown
    touchdown_rate: float = 0.6       # descent rate of the swing foot vs the body
    lateral_width: float = 0.04
    foot_lead: float = 0.05           # forward foothold offset at touchdown
    engage_tolerance: float = 0.08    # early-engagement slack of foothold lookups;
    # must stay below the gap between consecutive same-foot episodes minus the
    # stance duration, and above any realized contact-time deviation


@dataclass(frozen=True)
class BipedGait:
    """Footstep plan: stance episodes, touchdown events and the mode timeline.

    ``mode_spans`` is a sorted list of (start_time, mode); the mode holds until
    the next span begins.
    """

    params: BipedParams
    episodes: tuple
    events: tuple
    mode_spans: tuple
    guard_cov: float = 1e-3
    path: Optional[Callable[[float], np.ndarray]] = None   # body reference (x, y, z, vx, vy, vz)

    def mode_at(self, t: float) -> int:
        starts = [s for s, _ in self.mode_spans]
        idx = bisect.bisect_right(starts, t) - 1
        return self.mode_spans[max(idx, 0)][1]

    def _foot_index(self):
        cached = self.__dict__.get("_foot_cache")
        if cached is None:
            cached = {}
            for foot in ("L", "R"):
                eps = sorted((e for e in self.episodes if e.foot == foot),
                             key=lambda e: e.start)
                cached[foot] = ([e.start for e in eps], [e.position for e in eps])
            object.__setattr__(self, "_foot_cache", cached)
        return cached

    def stance_positions(self, t: float, feet) -> list:
        """World positions of the requested feet's active episodes at time t.

        Episodes engage slightly early (engage_tolerance) so that contact
        events realized ahead of the plan still bind to the new foothold.
        """
        tol = self.params.engage_tolerance
        index = self._foot_index()
        out = []
        for foot in feet:
            starts, positions = index[foot]
            k = bisect.bisect_right(starts, t + tol) - 1
            out.append(positions[max(k, 0)])
        return out

    def event_for(self, transition: str, t: float) -> GaitEvent:
        """The touchdown event of this transition nearest in time to t."""
        cands = [e for e in self.events if e.transition == transition]
        if not cands:
            raise ModelError(f"gait has no events of transition '{transition}'")
        return min(cands, key=lambda e: (abs(e.time - t), e.time))


def _leg_force(pos, vel, foothold, params: BipedParams):
    # scalar arithmetic: this sits on the innermost path of every flow
    # evaluation, so small-array numpy overhead matters
    dx = pos[0] - foothold[0]
    dy = pos[1] - foothold[1]
    dz = pos[2] - foothold[2]
    ell = math.sqrt(dx * dx + dy * dy + dz * dz)
    ux, uy, uz = dx / ell, dy / ell, dz / ell
    rdot = ux * vel[0] + uy * vel[1] + uz * vel[2]
    k, c = params.stiffness, params.damping
    phi = k * (params.rest_length - ell) - c * rdot
    force = np.array([phi * ux, phi * uy, phi * uz])
    # dF/dpos = u (-k u - c dr/dpos)^T + phi (I - u u^T) / ell
    gx = -k * ux - c * (vel[0] - rdot * ux) / ell
    gy = -k * uy - c * (vel[1] - rdot * uy) / ell
    gz = -k * uz - c * (vel[2] - rdot * uz) / ell
    p = phi / ell
    df_dpos = np.array([
        [ux * gx + p * (1.0 - ux * ux), ux * gy - p * ux * uy, ux * gz - p * ux * uz],
        [uy * gx - p * uy * ux, uy * gy + p * (1.0 - uy * uy), uy * gz - p * uy * uz],
        [uz * gx - p * uz * ux, uz * gy - p * uz * uy, uz * gz + p * (1.0 - uz * uz)]])
    df_dvel = np.array([
        [-c * ux * ux, -c * ux * uy, -c * ux * uz],
        [-c * uy * ux, -c * uy * uy, -c * uy * uz],
        [-c * uz * ux, -c * uz * uy, -c * uz * uz]])
    return force, df_dpos, df_dvel


_MODE_FEET = {MODE_DOUBLE: ("L", "R"), MODE_LEFT: ("L",), MODE_RIGHT: ("R",),
              MODE_FLIGHT: ()}


def _leg_force_value(pos, vel, foothold, params: BipedParams):
    dx = pos[0] - foothold[0]
    dy = pos[1] - foothold[1]
    dz = pos[2] - foothold[2]
    ell = math.sqrt(dx * dx + dy * dy + dz * dz)
    ux, uy, uz = dx / ell, dy / ell, dz / ell
    rdot = ux * vel[0] + uy * vel[1] + uz * vel[2]
    phi = params.stiffness * (params.rest_length - ell) - params.damping * rdot
    return phi * ux, phi * uy, phi * uz


def _biped_flow(gait: BipedGait, mode: int) -> FlowMap:
    params = gait.params
    feet = _MODE_FEET[mode]
    m = params.mass
    g = params.gravity

    def f(t, x, u):
        out = np.empty(6)
        out[0], out[1], out[2] = x[3], x[4], x[5]
        ax = u[0] / m
        ay = u[1] / m
        az = u[2] / m - g
        for p in gait.stance_positions(t, feet):
            fx, fy, fz = _leg_force_value(x, x[3:], p, params)
            ax += fx / m
            ay += fy / m
            az += fz / m
        out[3], out[4], out[5] = ax, ay, az
        return out

    def dfdx(t, x, u):
        jac = np.zeros((6, 6))
        jac[0, 3] = jac[1, 4] = jac[2, 5] = 1.0
        pos, vel = x[:3], x[3:]
        for p in gait.stance_positions(t, feet):
            _, dfp, dfv = _leg_force(pos, vel, p, params)
            jac[3:, :3] += dfp / m
            jac[3:, 3:] += dfv / m
        return jac

    def dfdu(t, x, u):
        jac = np.zeros((6, 3))
        jac[3, 0] = jac[4, 1] = jac[5, 2] = 1.0 / m
        return jac

    return FlowMap(f=f, dfdx=dfdx, dfdu=dfdu)


def _touchdown_guard(gait: BipedGait, transition: str, ng: int) -> GuardMap:
    params = gait.params

    def g(t, x):
        ev = gait.event_for(transition, t)
        vals = np.empty(ng)
        for i in range(ng):
            vals[i] = (x[2] - params.touchdown_height
                       - params.touchdown_rate * (t - ev.time) - ev.targets[i])
        return vals

    def dgdx(t, x):
        rows = np.zeros((ng, 6))
        rows[:, 2] = 1.0
        return rows

    def dgdt(t, x):
        return np.full(ng, -params.touchdown_rate)

    return GuardMap(g=g, ng=ng, dgdx=dgdx, dgdt=dgdt,
                    guard_cov=np.full(ng, gait.guard_cov))


def biped_model(gait: BipedGait) -> HybridModel:
    """Hybrid model of the planar biped bound to a footstep plan."""
    flows = tuple(_biped_flow(gait, mode) for mode in range(4))
    transitions = {
        "td-left": Transition(guard=_touchdown_guard(gait, "td-left", 1),
                              reset=identity_reset()),
        "td-right": Transition(guard=_touchdown_guard(gait, "td-right", 1),
                               reset=identity_reset()),
        "td-both": Transition(guard=_touchdown_guard(gait, "td-both", 2),
                              reset=identity_reset()),
    }
    gamma = np.zeros((6, 3))
    gamma[3:, :] = np.eye(3)
    return HybridModel(
        nx=6, nu=3, nw=3, flows=flows, transitions=transitions,
        gamma_flow=gamma, gamma_jump=gamma,
        noise_cov=1e-6 * np.eye(3), name="planar-biped")


def mpc_biped_params() -> BipedParams:
    """Well-damped legs and shallow touchdown compression: stable closed-loop
    walking for the MPC and Monte-Carlo experiments."""
    return BipedParams()


def forecast_biped_params() -> BipedParams:
    """Lightly damped legs, deep touchdown compression and a slow guard rate.

    Contact-timing uncertainty then injects strong, slowly-decaying vertical
    oscillations whose phase at the next event couples body-height variance
    back through the saltation update; this is the regime where the
    a-posteriori contraction visibly prevents covariance overgrowth.
    """
    return BipedParams(stiffness=150.0, damping=3.2, touchdown_height=0.90,
                       touchdown_rate=0.35, foot_lead=0.10, lateral_width=0.02)


def forecast_biped_task() -> "BipedTask":
    """Soft tracking and expensive inputs for the covariance forecasts."""
    return BipedTask(q_pos=8.0, q_vel=0.3, r_input=2.0, z_min=0.82)


# ---------------------------------------------------------------------------
# gait builders


def _path_factory(motion: str, speed: float, z_ref: float,
                  turn_rate: float = 0.35, terrain=None):
    """Body reference (pos, vel) as a function of time for the motion types."""

    def terrain_under(xq):
        return terrain(xq) if terrain is not None else 0.0

    if motion == "curve":
        def path(t):
            if abs(turn_rate) < 1e-12:
                px, py = speed * t, 0.0
                vx, vy = speed, 0.0
            else:
                radius = speed / turn_rate
                ang = turn_rate * t
                px = radius * math.sin(ang)
                py = radius * (1.0 - math.cos(ang))
                vx = speed * math.cos(ang)
                vy = speed * math.sin(ang)
            return np.array([px, py, z_ref + terrain_under(px), vx, vy, 0.0])
    else:
        def path(t):
            px = speed * t
            return np.array([px, 0.0, z_ref + terrain_under(px), speed, 0.0, 0.0])
    return path


def build_walk_gait(dt: float = 0.02, step_nodes: int = 18, double_nodes: int = 4,
                    n_steps: int = 24, speed: float = 0.25, motion: str = "forward",
                    step_height: float = 0.08, step_at: float = 0.6,
                    turn_rate: float = 0.9, guard_cov: float = 1e-3,
                    params: Optional[BipedParams] = None) -> BipedGait:
    """Alternating single-support walk; all times are integer grid multiples.

    Step period is step_nodes * dt with a double-support overlap of
    double_nodes * dt after each touchdown. ``motion`` selects forward, curve
    or step-ascent (terrain rises by step_height at x = step_at).
    """
    params = params or BipedParams()
    terrain = None
    if motion == "step-ascent":
        def terrain(xq, _h=step_height, _at=step_at):
            return _h if xq >= _at else 0.0
    path = _path_factory(motion, speed, params.touchdown_height,
                         turn_rate=turn_rate, terrain=terrain)

    def terrain_under(xq):
        return terrain(xq) if terrain is not None else 0.0

    def foothold(k):
        # foot landing at touchdown k: R for even k, L for odd k
        foot = "R" if k % 2 == 0 else "L"
        td_time = k * step_nodes * dt
        ref = path(td_time)
        heading = math.atan2(ref[4], ref[3])
        lat = 1.0 if foot == "L" else -1.0
        dx = params.foot_lead * math.cos(heading) - lat * params.lateral_width * math.sin(heading)
        dy = params.foot_lead * math.sin(heading) + lat * params.lateral_width * math.cos(heading)
        pos = np.array([ref[0] + dx, ref[1] + dy, 0.0])
        pos[2] = terrain_under(pos[0])
        return foot, td_time, pos

    episodes = []
    events = []
    mode_spans = [(-math.inf, MODE_DOUBLE)]
    # virtual touchdowns k = -1 (L) and k = 0 (R) seed the initial stance
    for k in range(-1, n_steps + 1):
        foot, td_time, pos = foothold(k)
        episodes.append(FootEpisode(foot=foot, position=pos, start=td_time, end=math.nan))
        lift_time = (k * step_nodes + double_nodes) * dt
        single_mode = MODE_RIGHT if foot == "R" else MODE_LEFT
        if k >= 0:
            mode_spans.append((lift_time, single_mode))
        if k >= 1:
            transition = "td-left" if foot == "L" else "td-right"
            events.append(GaitEvent(time=td_time, transition=transition,
                                    targets=np.array([pos[2]]), post_mode=MODE_DOUBLE))
            mode_spans.append((td_time, MODE_DOUBLE))
    mode_spans.sort(key=lambda sp: sp[0])
    episodes = _close_episodes(episodes)
    return BipedGait(params=params, episodes=tuple(episodes), events=tuple(events),
                     mode_spans=tuple(mode_spans), guard_cov=guard_cov, path=path)


def build_hop_gait(dt: float = 0.02, cycle_nodes: int = 24, flight_nodes: int = 6,
                   n_hops: int = 8, guard_cov: float = 1e-3,
                   params: Optional[BipedParams] = None) -> BipedGait:
    """Hopping in place: double support, flight, simultaneous two-foot landing."""
    params = params or BipedParams()
    episodes = []
    events = []
    mode_spans = [(-math.inf, MODE_DOUBLE)]
    footholds = {
        "L": np.array([0.0, params.lateral_width, 0.0]),
        "R": np.array([0.0, -params.lateral_width, 0.0])}
    for foot in ("L", "R"):
        episodes.append(FootEpisode(foot=foot, position=footholds[foot],
                                    start=-cycle_nodes * dt, end=math.nan))
    for k in range(1, n_hops + 1):
        liftoff = ((k - 1) * cycle_nodes + cycle_nodes - flight_nodes) * dt
        land = (k * cycle_nodes) * dt
        mode_spans.append((liftoff, MODE_FLIGHT))
        mode_spans.append((land, MODE_DOUBLE))
        events.append(GaitEvent(time=land, transition="td-both",
                                targets=np.zeros(2), post_mode=MODE_DOUBLE))
        for foot in ("L", "R"):
            episodes.append(FootEpisode(foot=foot, position=footholds[foot],
                                        start=land, end=math.nan))
    path = _path_factory("forward", 0.0, params.touchdown_height)
    episodes = _close_episodes(episodes)
    return BipedGait(params=params, episodes=tuple(episodes), events=tuple(events),
                     mode_spans=tuple(mode_spans), guard_cov=guard_cov, path=path)


def _close_episodes(episodes):
    """Fill liftoff metadata: an episode ends when the same foot lands again."""
    closed = []
    for e in episodes:
        later = [x.start for x in episodes if x.foot == e.foot and x.start > e.start]
        end = min(later) if later else math.inf
        closed.append(FootEpisode(foot=e.foot, position=e.position, start=e.start, end=end))
    return closed


# ---------------------------------------------------------------------------
# schedule and problem construction


def gait_schedule(gait: BipedGait, t0_index: int, horizon_nodes: int,
                  dt: float) -> ModeSchedule:
    """Multiple-shooting schedule on the dt grid with jump nodes at touchdowns.

    Events on the first grid interval or within two nodes of the horizon end
    are left to the mode timeline only (no jump node there; resets are the
    identity for the biped so this is exact).
    """
    t0 = t0_index * dt
    times = []
    modes = []
    jumps = {}
    event_by_time = {}
    for ev in gait.events:
        idx = round(ev.time / dt)
        if abs(ev.time - idx * dt) > 1e-9:
            raise ModelError("gait events must lie on the dt grid")
        event_by_time[idx] = ev
    for k in range(horizon_nodes + 1):
        idx = t0_index + k
        t = idx * dt
        times.append(t)
        if k < horizon_nodes and idx in event_by_time and 1 <= k <= horizon_nodes - 2:
            jumps[len(times) - 1] = event_by_time[idx].transition
            times.append(t)
    n_intervals = len(times) - 1
    for i in range(n_intervals):
        if i in jumps:
            modes.append(gait.mode_at(times[i] - 0.5 * dt))
        else:
            modes.append(gait.mode_at(0.5 * (times[i] + times[i + 1])))
    return ModeSchedule(times=np.array(times), interval_modes=tuple(modes),
                        jump_transitions=jumps)


@dataclass(frozen=True)
class BipedTask:
    """Cost and constraint configuration of the walking OCP."""

    z_min: float = 0.88
    z_max: float = 1.12
    u_max: float = 12.0
    q_pos: float = 40.0
    q_vel: float = 4.0
    r_input: float = 0.02
    q_terminal: float = 60.0
    probability: float = 0.9
    tighten_inputs: bool = True


def biped_problem(gait: BipedGait, model: HybridModel, t0_index: int,
                  horizon_nodes: int, dt: float,
                  task: Optional[BipedTask] = None) -> OcpProblem:
    """Tracking OCP over one receding-horizon window of the gait."""
    task = task or BipedTask()
    schedule = gait_schedule(gait, t0_index, horizon_nodes, dt)
    q = np.diag([task.q_pos] * 3 + [task.q_vel] * 3)
    r = np.diag([task.r_input] * 3)
    x_ref = gait.path
    stage = StageCost(q=q, r=r, x_ref=x_ref)
    terminal = StateCost(q=task.q_terminal * np.diag([1.0] * 3 + [0.2] * 3), x_ref=x_ref)
    jump = StateCost(q=0.0 * q, x_ref=x_ref)
    height_scale = max(gait.params.touchdown_height - task.z_min, 0.05)
    spec = BackoffSpec.from_probability(task.probability, clip_max=10.0 * height_scale)
    z_lo = LinearConstraint(
        name="height-min",
        cx=np.array([[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]),
        d=np.array([-task.z_min]), soft=True, backoff=spec)
    z_hi = LinearConstraint(
        name="height-max",
        cx=np.array([[0.0, 0.0, -1.0, 0.0, 0.0, 0.0]]),
        d=np.array([task.z_max]), soft=True, backoff=spec)
    u_spec = (BackoffSpec.from_probability(task.probability, clip_max=10.0 * task.u_max)
              if task.tighten_inputs else None)
    u_box = input_box("input-box", -task.u_max, task.u_max, model.nu, backoff=u_spec)
    return OcpProblem(
        model=model, schedule=schedule, stage_cost=stage, terminal_cost=terminal,
        jump_cost=jump,
        path_constraints=[z_lo, z_hi, u_box],
        event_constraints=[z_lo, z_hi],
        u_guess=np.zeros(3))


# ---------------------------------------------------------------------------
# registry


def get_model(name: str, **kwargs) -> HybridModel:
    """Built-in models by name: bouncing-mass, double-integrator, planar-biped."""
    if name == "bouncing-mass":
        return bouncing_mass_model(**kwargs)
    if name == "double-integrator":
        return double_integrator_model(**kwargs)
    if name == "planar-biped":
        gait = kwargs.pop("gait", None)
        if gait is None:
            gait = build_walk_gait(**kwargs)
            kwargs = {}
        return biped_model(gait)
    raise ModelError(f"unknown built-in model '{name}'")
