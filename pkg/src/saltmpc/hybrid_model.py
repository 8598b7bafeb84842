"""Multi-mode dynamical systems: flow maps, guards, resets and their derivatives.

A hybrid model is a collection of per-mode flow maps f_m(t, x, u) together with
named transitions, each carrying a guard g(t, x) (zero-crossing triggers the
switch) and a reset R(t, x) (instantaneous state change). Evaluators may supply
analytic jacobians; missing ones fall back to central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import EvaluationError, ModelError

FD_STEP = 1e-6


def fd_step(x) -> float:
    """Central-difference step scaled to the iterate magnitude."""
    return FD_STEP * (1.0 + float(np.max(np.abs(x))) if np.size(x) else 1.0)


def central_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     step: Optional[float] = None) -> np.ndarray:
    """Jacobian of fun at x via central differences, one column per coordinate."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if step is None else step
    f0 = np.atleast_1d(np.asarray(fun(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        fp = np.atleast_1d(np.asarray(fun(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(fun(x - e), dtype=float))
        jac[:, k] = (fp - fm) / (2.0 * h)
    return jac


def central_time_derivative(fun: Callable[[float], np.ndarray], t: float,
                            step: Optional[float] = None) -> np.ndarray:
    h = FD_STEP * (1.0 + abs(t)) if step is None else step
    fp = np.atleast_1d(np.asarray(fun(t + h), dtype=float))
    fm = np.atleast_1d(np.asarray(fun(t - h), dtype=float))
    return (fp - fm) / (2.0 * h)


@dataclass(frozen=True)
class FlowMap:
    """Continuous-time vector field of one mode, xdot = f(t, x, u)."""

    f: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    dfdx: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None
    dfdu: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class GuardMap:
    """Guard vector g(t, x); the transition fires on the zero-crossing g = 0.

    guard_cov holds the per-component variance of the guard condition
    (terrain-height uncertainty for touchdown guards).
    """

    g: Callable[[float, np.ndarray], np.ndarray]
    ng: int
    dgdx: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    dgdt: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    guard_cov: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.ng < 1:
            raise ModelError(f"guard must have ng >= 1, got {self.ng}")
        cov = self.guard_cov
        cov = np.zeros(self.ng) if cov is None else np.asarray(cov, dtype=float).reshape(self.ng)
        if np.any(cov < 0.0):
            raise ModelError("guard covariance components must be non-negative")
        object.__setattr__(self, "guard_cov", cov)


@dataclass(frozen=True)
class ResetMap:
    """Instantaneous state change x+ = R(t, x-) applied at the transition."""

    r: Callable[[float, np.ndarray], np.ndarray]
    drdx: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    drdt: Optional[Callable[[float, np.ndarray], np.ndarray]] = None


def identity_reset() -> ResetMap:
    return ResetMap(
        r=lambda t, x: np.array(x, dtype=float),
        drdx=lambda t, x: np.eye(np.size(x)),
        drdt=lambda t, x: np.zeros(np.size(x)),
    )


@dataclass(frozen=True)
class Transition:
    guard: GuardMap
    reset: ResetMap


@dataclass(frozen=True)
class HybridModel:
    """Immutable hybrid system definition.

    Parameters
    ----------
    nx, nu, nw : state, input and process-noise dimensions.
    flows : one FlowMap per mode; mode indices are contiguous from 0.
    transitions : named (guard, reset) pairs referenced by schedules.
    gamma_flow, gamma_jump : noise-injection matrices (nx, nw), one per
        node class (flow nodes / jump nodes).
    noise_cov : symmetric PSD noise shaping matrix W (nw, nw).
    integrator : "euler" (default) or "rk4".
    """

    nx: int
    nu: int
    nw: int
    flows: tuple
    transitions: dict
    gamma_flow: np.ndarray
    gamma_jump: np.ndarray
    noise_cov: np.ndarray
    integrator: str = "euler"
    name: str = ""

    def __post_init__(self):
        gf = np.asarray(self.gamma_flow, dtype=float).reshape(self.nx, self.nw)
        gj = np.asarray(self.gamma_jump, dtype=float).reshape(self.nx, self.nw)
        w = np.asarray(self.noise_cov, dtype=float).reshape(self.nw, self.nw)
        if np.max(np.abs(w - w.T)) > 1e-12:
            raise ModelError("noise_cov must be symmetric")
        if self.nw and np.min(np.linalg.eigvalsh(w)) < -1e-10:
            raise ModelError("noise_cov must be positive semidefinite")
        if self.integrator not in ("euler", "rk4"):
            raise ModelError(f"unknown integrator '{self.integrator}'")
        object.__setattr__(self, "gamma_flow", gf)
        object.__setattr__(self, "gamma_jump", gj)
        object.__setattr__(self, "noise_cov", w)
        object.__setattr__(self, "flows", tuple(self.flows))

    @property
    def num_modes(self) -> int:
        return len(self.flows)

    def flow(self, mode: int) -> FlowMap:
        if not 0 <= mode < len(self.flows):
            raise ModelError(f"unknown mode {mode} (model has {len(self.flows)} modes)")
        return self.flows[mode]

    def transition(self, name: str) -> Transition:
        try:
            return self.transitions[name]
        except KeyError:
            raise ModelError(f"unknown transition '{name}'") from None


def _check_finite(arr: np.ndarray, what: str):
    # a NaN/Inf anywhere poisons the sum; much cheaper than np.isfinite().all()
    if not math.isfinite(float(np.sum(arr))):
        raise EvaluationError(f"non-finite values in {what}")


def evaluate_flow(model: HybridModel, mode: int, t: float, x: np.ndarray,
                  u: np.ndarray):
    """Evaluate f_m(t, x, u) and jacobians (f, dfdx, dfdu).

    Analytic jacobians are used when the FlowMap provides them; otherwise
    central finite differences with step 1e-6 * (1 + |x|_inf).
    """
    fm = model.flow(mode)
    x = np.asarray(x, dtype=float).reshape(model.nx)
    u = np.asarray(u, dtype=float).reshape(model.nu)
    f = np.asarray(fm.f(t, x, u), dtype=float).reshape(model.nx)
    _check_finite(f, f"flow of mode {mode}")
    if fm.dfdx is not None:
        a = np.asarray(fm.dfdx(t, x, u), dtype=float).reshape(model.nx, model.nx)
    else:
        a = central_jacobian(lambda xx: fm.f(t, xx, u), x)
    if fm.dfdu is not None:
        b = np.asarray(fm.dfdu(t, x, u), dtype=float).reshape(model.nx, model.nu)
    else:
        b = central_jacobian(lambda uu: fm.f(t, x, uu), u) if model.nu else np.zeros((model.nx, 0))
    _check_finite(a, "flow state jacobian")
    _check_finite(b, "flow input jacobian")
    return f, a, b


def discretize_flow(model: HybridModel, mode: int, t: float, x: np.ndarray,
                    u: np.ndarray, dt: float):
    """One discrete step of the flow at w = 0: (x_next, A, B, Gamma).

    Forward Euler by default: x_next = x + f dt, A = I + dfdx dt, B = dfdu dt.
    The rk4 integrator chains jacobians through the four stages. Gamma is the
    model's flow-node noise-injection matrix (noise enters additively, so it
    is returned unchanged rather than differentiated).
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float).reshape(model.nx)
    u = np.asarray(u, dtype=float).reshape(model.nu)
    if model.integrator == "euler":
        f, a_c, b_c = evaluate_flow(model, mode, t, x, u)
        x_next = x + f * dt
        a = np.eye(model.nx) + a_c * dt
        b = b_c * dt
    else:
        x_next, a, b = _rk4_step(model, mode, t, x, u, dt)
    _check_finite(x_next, "discretized state")
    return x_next, a, b, model.gamma_flow


def _rk4_step(model, mode, t, x, u, dt):
    nx = model.nx
    eye = np.eye(nx)
    k1, a1, b1 = evaluate_flow(model, mode, t, x, u)
    j1x, j1u = a1, b1
    k2, a2, b2 = evaluate_flow(model, mode, t + 0.5 * dt, x + 0.5 * dt * k1, u)
    j2x = a2 @ (eye + 0.5 * dt * j1x)
    j2u = a2 @ (0.5 * dt * j1u) + b2
    k3, a3, b3 = evaluate_flow(model, mode, t + 0.5 * dt, x + 0.5 * dt * k2, u)
    j3x = a3 @ (eye + 0.5 * dt * j2x)
    j3u = a3 @ (0.5 * dt * j2u) + b3
    k4, a4, b4 = evaluate_flow(model, mode, t + dt, x + dt * k3, u)
    j4x = a4 @ (eye + dt * j3x)
    j4u = a4 @ (dt * j3u) + b4
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    a = eye + (dt / 6.0) * (j1x + 2.0 * j2x + 2.0 * j3x + j4x)
    b = (dt / 6.0) * (j1u + 2.0 * j2u + 2.0 * j3u + j4u)
    return x_next, a, b


def evaluate_reset(model: HybridModel, transition: str, t: float, x: np.ndarray):
    """Post-event state and jacobians (x_plus, drdx, drdt) of a named reset."""
    tr = model.transition(transition)
    x = np.asarray(x, dtype=float).reshape(model.nx)
    x_plus = np.asarray(tr.reset.r(t, x), dtype=float).reshape(model.nx)
    _check_finite(x_plus, f"reset of transition '{transition}'")
    if tr.reset.drdx is not None:
        drdx = np.asarray(tr.reset.drdx(t, x), dtype=float).reshape(model.nx, model.nx)
    else:
        drdx = central_jacobian(lambda xx: tr.reset.r(t, xx), x)
    if tr.reset.drdt is not None:
        drdt = np.asarray(tr.reset.drdt(t, x), dtype=float).reshape(model.nx)
    else:
        drdt = central_time_derivative(lambda tt: tr.reset.r(tt, x), t).reshape(model.nx)
    _check_finite(drdx, "reset state jacobian")
    _check_finite(drdt, "reset time derivative")
    return x_plus, drdx, drdt


def evaluate_guard(model: HybridModel, transition: str, t: float, x: np.ndarray):
    """Guard vector and jacobians (g, dgdx, dgdt) of a named transition.

    Guards are signed distances that decrease toward the event; g = 0 fires
    the switch.
    """
    tr = model.transition(transition)
    ng = tr.guard.ng
    x = np.asarray(x, dtype=float).reshape(model.nx)
    g = np.atleast_1d(np.asarray(tr.guard.g(t, x), dtype=float)).reshape(ng)
    _check_finite(g, f"guard of transition '{transition}'")
    if tr.guard.dgdx is not None:
        dgdx = np.asarray(tr.guard.dgdx(t, x), dtype=float).reshape(ng, model.nx)
    else:
        dgdx = central_jacobian(lambda xx: tr.guard.g(t, xx), x).reshape(ng, model.nx)
    if tr.guard.dgdt is not None:
        dgdt = np.asarray(tr.guard.dgdt(t, x), dtype=float).reshape(ng)
    else:
        dgdt = central_time_derivative(lambda tt: tr.guard.g(tt, x), t).reshape(ng)
    _check_finite(dgdx, "guard state jacobian")
    _check_finite(dgdt, "guard time derivative")
    return g, dgdx, dgdt
