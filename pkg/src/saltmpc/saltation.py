"""Saltation and guard saltation matrices for transversal contact events.

For a switch with reset R and guard component g_i, the saltation matrix is the
rank-1 correction of the reset jacobian

    Xi_x = dRdx + (f_plus - dRdx f_minus - dRdt) dgdx_i / lam_i,
    lam_i = dgdt_i + dgdx_i . f_minus,

and the guard saltation matrix (sensitivity of the post-event state to an
additive perturbation of the guard condition) is

    Xi_g = (dRdx f_minus + dRdt - f_plus) / lam_i.

Both require the transversality condition lam_i < 0: the guard value strictly
decreases along the flow at the event.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EventError, ScheduleError
from .hybrid_model import HybridModel, evaluate_flow, evaluate_guard, evaluate_reset

TRANSVERSALITY_EPS = 1e-8


@dataclass(frozen=True)
class EventLinearization:
    """All first-order data of one contact event.

    f_minus / f_plus are the pre/post-event vector fields evaluated on the
    neighbouring discretization nodes; reset and guard derivatives are taken
    at the jump node itself.
    """

    t_minus: float
    t_plus: float
    x_minus: np.ndarray
    x_plus: np.ndarray
    f_minus: np.ndarray
    f_plus: np.ndarray
    drdx: np.ndarray
    drdt: np.ndarray
    dgdx: np.ndarray
    dgdt: np.ndarray
    guard_cov: np.ndarray
    guard_value: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        for name in ("x_minus", "x_plus", "f_minus", "f_plus", "drdx", "drdt",
                     "dgdx", "dgdt", "guard_cov"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise EventError(f"non-finite entries in event linearization field '{name}'")
            object.__setattr__(self, name, arr)
        if self.guard_value is None:
            object.__setattr__(self, "guard_value", np.zeros(self.ng))

    @property
    def nx(self) -> int:
        return self.x_minus.size

    @property
    def ng(self) -> int:
        return self.dgdx.shape[0]


@dataclass(frozen=True)
class SaltationComponent:
    """Saltation matrices of one guard component; no matrices when grazing."""

    index: int
    denominator: float
    transversal: bool
    xi_x: Optional[np.ndarray] = None
    xi_g: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SaltationResult:
    components: tuple

    @property
    def transversal_components(self):
        return tuple(c for c in self.components if c.transversal)

    @property
    def num_skipped(self) -> int:
        return sum(1 for c in self.components if not c.transversal)


def transversality(lin: EventLinearization, component_i: int,
                   eps: float = TRANSVERSALITY_EPS):
    """Guard rate along the flow: (value, is_transversal).

    value = dgdt_i + dgdx_i . f_minus; the component is transversal when the
    value is below -eps (the guard strictly decreases into the event).
    """
    value = float(lin.dgdt[component_i] + lin.dgdx[component_i] @ lin.f_minus)
    return value, value < -eps


def saltation_matrix(lin: EventLinearization, component_i: int,
                     eps: float = TRANSVERSALITY_EPS) -> np.ndarray:
    """Saltation matrix Xi_x of one transversal guard component."""
    lam, ok = transversality(lin, component_i, eps)
    if not ok:
        raise EventError(
            f"guard component {component_i} is not transversal (rate {lam:.3e})")
    num = lin.f_plus - lin.drdx @ lin.f_minus - lin.drdt
    return lin.drdx + np.outer(num, lin.dgdx[component_i]) / lam


def guard_saltation_matrix(lin: EventLinearization, component_i: int,
                           eps: float = TRANSVERSALITY_EPS) -> np.ndarray:
    """Guard saltation column Xi_g of one transversal guard component."""
    lam, ok = transversality(lin, component_i, eps)
    if not ok:
        raise EventError(
            f"guard component {component_i} is not transversal (rate {lam:.3e})")
    return (lin.drdx @ lin.f_minus + lin.drdt - lin.f_plus) / lam


def saltation_result(lin: EventLinearization,
                     eps: float = TRANSVERSALITY_EPS) -> SaltationResult:
    """Per-component saltation matrices; grazing components are flagged only."""
    comps = []
    for i in range(lin.ng):
        lam, ok = transversality(lin, i, eps)
        if ok:
            comps.append(SaltationComponent(
                index=i, denominator=lam, transversal=True,
                xi_x=saltation_matrix(lin, i, eps),
                xi_g=guard_saltation_matrix(lin, i, eps)))
        else:
            comps.append(SaltationComponent(index=i, denominator=lam, transversal=False))
    return SaltationResult(components=tuple(comps))


def build_event_linearization(model: HybridModel, schedule, trajectory,
                              jump_node_j: int) -> EventLinearization:
    """Assemble the event linearization of jump node j from trajectory data.

    f_minus is approximated with the data of node j-1 under the pre-event
    mode, f_plus with node j+1 under the post-event mode; the reset and guard
    are linearized at (t_j, x_j). Nodes j-1 and j+1 must exist and carry
    inputs.
    """
    j = jump_node_j
    if j not in schedule.jump_nodes:
        raise ScheduleError(f"node {j} is not a jump node")
    n_terminal = len(schedule.times) - 1
    # need flow nodes with inputs on both sides: j-1 and j+1 in I
    if j - 1 < 0 or j - 1 in schedule.jump_nodes:
        raise ScheduleError(f"jump node {j} has no pre-event flow neighbour")
    if j + 1 > n_terminal - 1 or j + 1 in schedule.jump_nodes:
        raise ScheduleError(f"jump node {j} has no post-event flow neighbour")
    transition = schedule.jump_transitions[j]
    mode_minus = schedule.interval_modes[j - 1]
    t_minus = schedule.times[j - 1]
    x_minus_node = trajectory.states[j - 1]
    u_minus = trajectory.input_at(j - 1)
    f_minus, _, _ = evaluate_flow(model, mode_minus, t_minus, x_minus_node, u_minus)

    t_plus = schedule.times[j + 1]
    x_plus_node = trajectory.states[j + 1]
    mode_plus = schedule.interval_modes[j + 1]
    u_plus = trajectory.input_at(j + 1)
    f_plus, _, _ = evaluate_flow(model, mode_plus, t_plus, x_plus_node, u_plus)

    t_j = schedule.times[j]
    x_j = trajectory.states[j]
    x_reset, drdx, drdt = evaluate_reset(model, transition, t_j, x_j)
    g, dgdx, dgdt = evaluate_guard(model, transition, t_j, x_j)
    guard_cov = model.transition(transition).guard.guard_cov
    return EventLinearization(
        t_minus=t_j, t_plus=t_j, x_minus=x_j, x_plus=x_reset,
        f_minus=f_minus, f_plus=f_plus, drdx=drdx, drdt=drdt,
        dgdx=dgdx, dgdt=dgdt, guard_cov=guard_cov, guard_value=g)
