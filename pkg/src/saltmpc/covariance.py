"""Belief-covariance propagation, contact-event updates, and backoff terms.

Flow nodes use closed-loop propagation P+ = (A + BK) P (A + BK)^T + G W G^T.
Contact events compose an a priori update built from saltation matrices with
an EKF-like a posteriori contraction that treats the guard as a measurement.
Backoff terms convert the propagated covariance into constraint tightenings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CovarianceError, EventError, NumericalError
from .saltation import SaltationResult, build_event_linearization, saltation_result

SYM_TOL = 1e-12
PSD_TOL = -1e-10


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def check_covariance(p: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Validate symmetry (1e-12) and numerical PSD-ness (eigmin >= -1e-10)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise CovarianceError(f"{what} must be square, got shape {p.shape}")
    drift = float(np.max(np.abs(p - p.T))) if p.size else 0.0
    if drift > SYM_TOL:
        raise CovarianceError(f"{what} symmetry drift {drift:.3e} exceeds {SYM_TOL}")
    if p.size and float(np.min(np.linalg.eigvalsh(p))) < PSD_TOL:
        raise CovarianceError(f"{what} has eigenvalue below {PSD_TOL}")
    return p


def propagate_flow(p: np.ndarray, a: np.ndarray, b: np.ndarray, k: np.ndarray,
                   gamma: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Closed-loop flow-node update (A + BK) P (A + BK)^T + G W G^T."""
    p = check_covariance(p, "flow-node covariance")
    acl = a + b @ k
    p_next = acl @ p @ acl.T + gamma @ w @ gamma.T
    return symmetrize(p_next)


def propagate_jump_apriori(p: np.ndarray, results: SaltationResult,
                           guard_cov: np.ndarray) -> np.ndarray:
    """A priori event update summed over transversal guard components.

    P_hat = sum_i  Xi_x_i P Xi_x_i^T + Xi_g_i C_g_i Xi_g_i^T. Components that
    fail transversality are excluded; with none left the covariance cannot be
    updated and an EventError is raised.
    """
    p = check_covariance(p, "pre-event covariance")
    guard_cov = np.asarray(guard_cov, dtype=float)
    comps = results.transversal_components
    if not comps:
        raise EventError("all guard components are non-transversal; "
                         "covariance update undefined")
    p_hat = np.zeros_like(p)
    for comp in comps:
        c_g = float(guard_cov[comp.index])
        if c_g < 0.0:
            raise EventError(f"negative guard covariance for component {comp.index}")
        p_hat += comp.xi_x @ p @ comp.xi_x.T
        p_hat += c_g * np.outer(comp.xi_g, comp.xi_g)
    return symmetrize(p_hat)


def posterior_update(p_hat: np.ndarray, dgdx: np.ndarray, guard_cov: np.ndarray):
    """EKF-like contraction treating the guard as a measurement: (L, P).

    L = P_hat G^T (G P_hat G^T + diag(C_g))^-1 and P = (I - L G) P_hat.
    A singular innovation raises NumericalError with its condition number,
    except in the exactly-degenerate case P_hat G^T = 0 where the gain is
    identically zero and P = P_hat.
    """
    p_hat = check_covariance(p_hat, "a priori covariance")
    g = np.atleast_2d(np.asarray(dgdx, dtype=float))
    c = np.diag(np.atleast_1d(np.asarray(guard_cov, dtype=float)))
    innovation = g @ p_hat @ g.T + c
    pg = p_hat @ g.T
    cond = np.linalg.cond(innovation) if innovation.size else np.inf
    if not np.isfinite(cond) or cond > 1e14:
        if np.all(pg == 0.0):
            # zero-information limit: the gain vanishes identically
            return np.zeros_like(pg), p_hat
        raise NumericalError(
            f"singular innovation in posterior update (cond {cond:.3e})")
    gain = np.linalg.solve(innovation, pg.T).T
    p = (np.eye(p_hat.shape[0]) - gain @ g) @ p_hat
    return gain, symmetrize(p)


@dataclass(frozen=True)
class JumpUpdateOptions:
    """Options of the composed event update; posterior=False gives the pure
    a priori (open-loop) variant."""

    posterior: bool = True
    transversality_eps: float = 1e-8


def propagate_jump(p: np.ndarray, model, schedule, trajectory, j: int,
                   options: Optional[JumpUpdateOptions] = None):
    """Full covariance update through jump node j: (P_next, diagnostics).

    Composes the event linearization, the a priori saltation update and,
    unless disabled, the a posteriori contraction. Diagnostics report the
    number of skipped (grazing) guard components.
    """
    options = options or JumpUpdateOptions()
    lin = build_event_linearization(model, schedule, trajectory, j)
    results = saltation_result(lin, eps=options.transversality_eps)
    p_hat = propagate_jump_apriori(p, results, lin.guard_cov)
    if options.posterior:
        _, p_next = posterior_update(p_hat, lin.dgdx, lin.guard_cov)
    else:
        p_next = p_hat
    return p_next, {"skipped_components": results.num_skipped}


def propagate_jump_baseline(p: np.ndarray, drdx: np.ndarray, gamma_jump: np.ndarray,
                            w_jump: np.ndarray) -> np.ndarray:
    """Dynamics-only event update: dRdx P dRdx^T + G_j W_j G_j^T."""
    p = check_covariance(p, "pre-event covariance")
    p_next = drdx @ p @ drdx.T + gamma_jump @ w_jump @ gamma_jump.T
    return symmetrize(p_next)


@dataclass(frozen=True)
class BackoffSpec:
    """Tightening amount per constraint row: beta = gamma * stddev, clipped.

    gamma may be given directly (robust mode uses 1.0) or derived from a
    chance-constraint probability p in (0.5, 1) as the standard-normal
    quantile.
    """

    gamma: float = 1.0
    probability: Optional[float] = None
    clip_max: float = math.inf

    def __post_init__(self):
        if self.clip_max < 0.0:
            raise ValueError("clip_max must be non-negative")
        if self.probability is not None:
            gamma_p = gamma_from_probability(self.probability)
            if abs(self.gamma - gamma_p) > 1e-6:
                object.__setattr__(self, "gamma", gamma_p)
        if self.gamma < 0.0:
            raise ValueError("gamma must be non-negative")

    @classmethod
    def from_probability(cls, p: float, clip_max: float = math.inf) -> "BackoffSpec":
        return cls(gamma=gamma_from_probability(p), probability=p, clip_max=clip_max)


def backoff_flow(p: np.ndarray, k: np.ndarray, grad_h_x: np.ndarray,
                 grad_h_u: np.ndarray, gamma: float,
                 clip_max: float = math.inf) -> float:
    """Backoff of one flow-node constraint row under feedback gain K.

    beta = gamma * sqrt(v^T P v) with v = grad_h_x + K^T grad_h_u; the sqrt
    argument is clamped at zero to absorb -1e-12 scale PSD drift.
    """
    if gamma < 0.0:
        raise ValueError("gamma must be non-negative")
    v = np.asarray(grad_h_x, dtype=float) + np.asarray(k, dtype=float).T @ np.asarray(
        grad_h_u, dtype=float)
    quad = float(v @ p @ v)
    beta = gamma * math.sqrt(max(quad, 0.0))
    return min(beta, clip_max)


def backoff_jump(p: np.ndarray, grad_h_x: np.ndarray, gamma: float,
                 clip_max: float = math.inf) -> float:
    """Backoff of a state-only constraint row at jump/terminal nodes."""
    if gamma < 0.0:
        raise ValueError("gamma must be non-negative")
    v = np.asarray(grad_h_x, dtype=float)
    quad = float(v @ p @ v)
    beta = gamma * math.sqrt(max(quad, 0.0))
    return min(beta, clip_max)


def _standard_normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gamma_from_probability(p: float) -> float:
    """Standard-normal quantile for chance constraints, 0.5 < p < 1.

    Newton iteration on the error-function CDF with a bisection safeguard;
    accurate to 1e-8.
    """
    if not 0.5 < p < 1.0:
        raise ValueError(f"probability must lie in (0.5, 1.0), got {p}")
    lo, hi = 0.0, 10.0
    x = 1.0
    for _ in range(100):
        f = _standard_normal_cdf(x) - p
        if f > 0.0:
            hi = x
        else:
            lo = x
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf > 0.0:
            x_new = x - f / pdf
        else:
            x_new = 0.5 * (lo + hi)
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) < 1e-12:
            x = x_new
            break
        x = x_new
    return x
