"""Riccati recursion for the stage-wise quadratic subproblem.

Jump nodes are control-free stages whose dynamics jacobian is the reset
jacobian; their switching equalities are pure-state constraints that cannot be
eliminated at their own stage, so the backward pass carries the value function
parametrically in the switching duals nu:

    V_n(dx, nu) = 1/2 dx'P dx + s'dx + dx'M nu + 1/2 nu'N nu + m'nu + const.

The duals are resolved at node 0 where dx_0 is fixed, then one forward rollout
produces the search direction. Feedback gains fall out of the backward pass
without extra factorization work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError

REG_INITIAL = 1e-8
REG_MAX = 1e8


@dataclass
class RiccatiStage:
    """Quadratic data of one node, barrier contributions already condensed."""

    kind: str                      # "flow" | "jump" | "terminal"
    qxx: np.ndarray
    qx: np.ndarray
    a: Optional[np.ndarray] = None          # dynamics jacobian to next node
    b: Optional[np.ndarray] = None          # input jacobian (flow nodes)
    c: Optional[np.ndarray] = None          # dynamics defect F(x_n, u_n) - x_{n+1}
    quu: Optional[np.ndarray] = None
    qu: Optional[np.ndarray] = None
    qxu: Optional[np.ndarray] = None        # (nx, nu) cross term
    gsw: Optional[np.ndarray] = None        # switching rows (n_k, nx) at jump nodes
    gsw_res: Optional[np.ndarray] = None    # switching residuals (n_k,)


@dataclass
class RiccatiSolution:
    dxs: np.ndarray                # (N+1, nx)
    dus: list                      # per node: (nu,) at flow nodes, None otherwise
    gains: list                    # per node: K at flow nodes, None otherwise
    kff: list                      # feedforward (incl. dual part) per flow node
    lambdas: np.ndarray            # (N+1, nx) dynamics multipliers
    nu: np.ndarray                 # switching duals, stacked by node order
    nu_slices: dict                # node index -> slice into nu
    value_p: list                  # P_n per node (cost-to-go hessians)
    value_s: list
    regularization: float = 0.0    # largest Levenberg shift applied
    quu_bar: list = field(default_factory=list)   # condensed input hessians
    su_bar: list = field(default_factory=list)    # condensed cross terms


def _solve_reg(quu_bar, rhs, node):
    """Solve quu_bar X = rhs with Levenberg regularization on failure."""
    reg = 0.0
    lam = REG_INITIAL
    nu_dim = quu_bar.shape[0]
    mat = quu_bar
    while True:
        try:
            chol = np.linalg.cholesky(mat)
            break
        except np.linalg.LinAlgError:
            if lam > REG_MAX:
                raise NumericalError(
                    f"indefinite input hessian at node {node} "
                    f"(regularization exhausted at {lam:.1e})") from None
            mat = quu_bar + lam * np.eye(nu_dim)
            reg = lam
            lam *= 2.0
    y = np.linalg.solve(chol, rhs)
    x = np.linalg.solve(chol.T, y)
    return x, mat, reg


def backward_forward(stages: list, dx0: np.ndarray) -> RiccatiSolution:
    """Backward pass, switching-dual solve at node 0, forward rollout."""
    n_total = len(stages)
    nx = stages[0].qx.size
    nu_slices = {}
    offset = 0
    for idx, st in enumerate(stages):
        if st.kind == "jump" and st.gsw is not None and st.gsw.shape[0] > 0:
            nu_slices[idx] = slice(offset, offset + st.gsw.shape[0])
            offset += st.gsw.shape[0]
    n_sw = offset

    p_mats = [None] * n_total
    s_vecs = [None] * n_total
    m_mats = [None] * n_total
    gains = [None] * n_total
    kffs = [None] * n_total
    tmats = [None] * n_total
    quu_bars = [None] * n_total
    su_bars = [None] * n_total
    max_reg = 0.0

    term = stages[-1]
    p_mats[-1] = 0.5 * (term.qxx + term.qxx.T)
    s_vecs[-1] = term.qx.copy()
    m_mats[-1] = np.zeros((nx, n_sw))
    n_mat = np.zeros((n_sw, n_sw))
    m_vec = np.zeros(n_sw)

    for n in range(n_total - 2, -1, -1):
        st = stages[n]
        p_next, s_next, m_next = p_mats[n + 1], s_vecs[n + 1], m_mats[n + 1]
        a, c = st.a, st.c
        pc_s = p_next @ c + s_next
        if st.kind == "jump":
            p_cur = st.qxx + a.T @ p_next @ a
            s_cur = st.qx + a.T @ pc_s
            m_cur = a.T @ m_next
            m_vec = m_vec + m_next.T @ c
            if n in nu_slices:
                sl = nu_slices[n]
                m_cur[:, sl] += st.gsw.T
                m_vec[sl] += st.gsw_res
        else:
            b = st.b
            quu_bar = st.quu + b.T @ p_next @ b
            su_bar = st.qxu.T + b.T @ p_next @ a
            qu_bar = st.qu + b.T @ pc_s
            bm = b.T @ m_next
            rhs = np.concatenate(
                [su_bar, qu_bar[:, None], bm], axis=1)
            sol, quu_reg, reg = _solve_reg(quu_bar, rhs, n)
            max_reg = max(max_reg, reg)
            nu_dim = b.shape[1]
            k_gain = -sol[:, :nx]
            k_ff = -sol[:, nx]
            t_gain = -sol[:, nx + 1:]
            p_cur = st.qxx + a.T @ p_next @ a + su_bar.T @ k_gain
            s_cur = st.qx + a.T @ pc_s + su_bar.T @ k_ff
            m_cur = (a + b @ k_gain).T @ m_next
            n_mat = n_mat - t_gain.T @ quu_reg @ t_gain
            m_vec = m_vec + m_next.T @ (c + b @ k_ff)
            gains[n] = k_gain
            kffs[n] = k_ff
            tmats[n] = t_gain
            quu_bars[n] = quu_reg
            su_bars[n] = su_bar
        p_mats[n] = 0.5 * (p_cur + p_cur.T)
        s_vecs[n] = s_cur
        m_mats[n] = m_cur

    if n_sw:
        rhs = m_mats[0].T @ dx0 + m_vec
        nu_vec = _solve_switching_duals(n_mat, rhs)
    else:
        nu_vec = np.zeros(0)

    dxs = np.zeros((n_total, nx))
    dxs[0] = dx0
    dus = [None] * n_total
    kff_total = [None] * n_total
    for n in range(n_total - 1):
        st = stages[n]
        if st.kind == "flow":
            ff = kffs[n] + tmats[n] @ nu_vec
            du = gains[n] @ dxs[n] + ff
            dxs[n + 1] = st.a @ dxs[n] + st.b @ du + st.c
            dus[n] = du
            kff_total[n] = ff
        else:
            dxs[n + 1] = st.a @ dxs[n] + st.c

    lambdas = np.zeros((n_total, nx))
    for n in range(n_total):
        lambdas[n] = p_mats[n] @ dxs[n] + s_vecs[n] + m_mats[n] @ nu_vec

    return RiccatiSolution(
        dxs=dxs, dus=dus, gains=gains, kff=kff_total, lambdas=lambdas,
        nu=nu_vec, nu_slices=nu_slices, value_p=p_mats, value_s=s_vecs,
        regularization=max_reg, quu_bar=quu_bars, su_bar=su_bars)


def _solve_switching_duals(n_mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve -N nu = rhs; N is negative definite when constraints are
    independently controllable, otherwise fall back to a least-squares dual."""
    neg = -n_mat
    try:
        chol = np.linalg.cholesky(neg)
        y = np.linalg.solve(chol, rhs)
        return np.linalg.solve(chol.T, y)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(neg, rcond=1e-12) @ rhs
