import dataclasses

import numpy as np
import pytest

from saltmpc import (
    BackoffSpec,
    LinearConstraint,
    ModeSchedule,
    OcpProblem,
    ProblemError,
    SolveOptions,
    StageCost,
    StateCost,
    input_box,
    solve,
    transcribe,
)
from saltmpc.benchmarks import (
    biped_model,
    biped_problem,
    build_walk_gait,
    double_integrator_model,
)
from saltmpc.ocp import (
    _evaluate_nodes,
    covariance_pass,
    interior_point_condense,
    iterate,
    line_search,
)
from saltmpc.riccati import RiccatiStage, backward_forward
from oracles import dare_fixed_point, dense_kkt_solve

DT = 0.1


def _di_schedule(n, jump_at=None):
    times, modes, jumps = [], [], {}
    t = 0.0
    node = 0
    for i in range(n):
        times.append(t)
        if jump_at is not None and i == jump_at:
            jumps[node] = "switch"
            times.append(t)
            modes.append(0)
            node += 1
        modes.append(0)
        t += DT
        node += 1
    times.append(t)
    return ModeSchedule(times=np.array(times), interval_modes=tuple(modes),
                        jump_transitions=jumps)


def _lq_problem(n=20, q=None, r=None, x_ref=None, terminal_q=None, jump_at=None,
                path_constraints=(), event_constraints=(), switch_position=1.0):
    model = double_integrator_model(switch_position=switch_position)
    sched = _di_schedule(n, jump_at)
    q = np.diag([1.0, 0.1]) if q is None else q
    r = np.array([[0.5]]) if r is None else r
    ref = (lambda t: np.zeros(2)) if x_ref is None else x_ref
    stage = StageCost(q=q, r=r, x_ref=ref)
    terminal = StateCost(q=(q if terminal_q is None else terminal_q), x_ref=ref)
    return OcpProblem(model=model, schedule=sched, stage_cost=stage,
                      terminal_cost=terminal,
                      path_constraints=list(path_constraints),
                      event_constraints=list(event_constraints))


def _zero_unc(**kw):
    return SolveOptions(guard_cov_override=0.0,
                        w_flow_override=np.zeros((1, 1)), **kw)


class TestTranscription:
    def test_jump_layout(self):
        prob = _lq_problem(n=10, jump_at=5)
        state = transcribe(prob, np.zeros(2))
        assert state.num_state_nodes == 12  # 11 grid + 1 duplicate
        assert state.num_input_nodes == 10

    def test_spec_counts_single_jump(self):
        # N = 10 intervals, one of which is a jump: 11 state nodes, 9 inputs
        prob = _lq_problem(n=9, jump_at=4)
        state = transcribe(prob, np.zeros(2))
        assert state.num_state_nodes == 11
        assert state.num_input_nodes == 9

    def test_no_jump_layout(self):
        prob = _lq_problem(n=10)
        state = transcribe(prob, np.zeros(2))
        assert state.num_state_nodes == 11
        assert state.num_input_nodes == 10

    def test_constant_hold_guess(self):
        prob = _lq_problem(n=5)
        state = transcribe(prob, np.array([0.3, -0.1]))
        assert np.all(state.states == np.array([0.3, -0.1]))

    def test_zero_horizon_rejected(self):
        with pytest.raises(Exception):
            _di_schedule(0)

    def test_hard_tightened_state_constraint_rejected(self):
        con = LinearConstraint(name="pos", cx=np.array([[1.0, 0.0]]),
                               d=np.array([1.0]), soft=False,
                               backoff=BackoffSpec(gamma=1.0))
        with pytest.raises(ProblemError):
            _lq_problem(n=4, path_constraints=[con])


class TestRiccatiOracles:
    def test_one_step_lq_hand_value(self):
        # terminal hessian I, dynamics x+ = x + u: K = -(I + I)^-1 I = -1/2
        stages = [
            RiccatiStage(kind="flow", qxx=np.zeros((1, 1)), qx=np.zeros(1),
                         a=np.eye(1), b=np.eye(1), c=np.zeros(1),
                         quu=np.eye(1), qu=np.zeros(1), qxu=np.zeros((1, 1))),
            RiccatiStage(kind="terminal", qxx=np.eye(1), qx=np.zeros(1)),
        ]
        sol = backward_forward(stages, np.zeros(1))
        np.testing.assert_allclose(sol.gains[0], [[-0.5]], atol=1e-14)

    def test_long_horizon_matches_dare(self):
        a = np.array([[1.0, DT], [0.0, 1.0]])
        b = np.array([[0.0], [DT]])
        q = np.diag([1.0, 0.1])
        r = np.array([[0.5]])
        p_inf, k_inf = dare_fixed_point(a, b, q, r)
        stages = []
        for _ in range(300):
            stages.append(RiccatiStage(kind="flow", qxx=q, qx=np.zeros(2),
                                       a=a, b=b, c=np.zeros(2), quu=r,
                                       qu=np.zeros(1), qxu=np.zeros((2, 1))))
        stages.append(RiccatiStage(kind="terminal", qxx=q, qx=np.zeros(2)))
        sol = backward_forward(stages, np.array([1.0, 0.0]))
        np.testing.assert_allclose(sol.gains[0], k_inf, atol=1e-6)
        np.testing.assert_allclose(sol.value_p[0], p_inf, atol=1e-6)

    def test_gain_stagewise_optimality(self):
        rng = np.random.default_rng(17)
        stages = []
        for _ in range(12):
            b = rng.standard_normal((3, 2))
            m = rng.standard_normal((2, 2))
            stages.append(RiccatiStage(
                kind="flow", qxx=np.eye(3), qx=rng.standard_normal(3),
                a=rng.standard_normal((3, 3)), b=b, c=rng.standard_normal(3),
                quu=m @ m.T + 0.5 * np.eye(2), qu=rng.standard_normal(2),
                qxu=0.1 * rng.standard_normal((3, 2))))
        stages.append(RiccatiStage(kind="terminal", qxx=np.eye(3), qx=np.zeros(3)))
        sol = backward_forward(stages, rng.standard_normal(3))
        for k, quu_bar, su_bar in zip(sol.gains, sol.quu_bar, sol.su_bar):
            if k is None:
                continue
            assert np.max(np.abs(quu_bar @ k + su_bar)) < 1e-10

    def test_newton_step_matches_dense_kkt_n3(self):
        # N = 3 flow intervals plus a jump node, switching equality and
        # condensed inequalities; the jump sits two intervals in so that the
        # position-type switching row is reachable from the inputs
        con_u = input_box("ubox", -2.0, 2.0, 1)
        con_x = LinearConstraint(name="pos", cx=np.array([[1.0, 0.0]]),
                                 d=np.array([2.0]), soft=True,
                                 backoff=BackoffSpec(gamma=1.0, clip_max=5.0))
        prob = _lq_problem(n=3, jump_at=2, switch_position=0.4,
                           path_constraints=[con_u, con_x])
        state = transcribe(prob, np.array([0.2, 0.5]))
        state.states = state.states + 0.01 * np.arange(state.num_state_nodes)[:, None]
        opts = SolveOptions(p0=0.01 * np.eye(2))
        evals = _evaluate_nodes(state)
        covs, backoffs, _ = covariance_pass(state, prob, opts, evals)
        state.covs, state.backoffs = covs, backoffs
        from saltmpc.ocp import _init_slacks
        _init_slacks(state, evals, backoffs)
        stages = interior_point_condense(state, evals, backoffs, opts)
        sol = backward_forward(stages, state.x_init - state.states[0])
        dxs, dus, lambdas, nus = dense_kkt_solve(stages, state.x_init - state.states[0])
        np.testing.assert_allclose(sol.dxs, dxs, atol=1e-8)
        for i, du in dus.items():
            np.testing.assert_allclose(sol.dus[i], du, atol=1e-8)
        np.testing.assert_allclose(sol.lambdas, lambdas, atol=1e-8)
        for j, sl in sol.nu_slices.items():
            np.testing.assert_allclose(sol.nu[sl], nus[j], atol=1e-8)

    def test_switching_equality_satisfied_after_newton(self):
        prob = _lq_problem(n=6, jump_at=3, switch_position=0.4)
        state = transcribe(prob, np.array([0.0, 0.5]))
        opts = _zero_unc(max_iters=20, merit_backtracking=False)
        traj, diag = solve(prob, opts, x_init=np.array([0.0, 0.5]))
        assert diag.converged
        jump_node = next(iter(prob.schedule.jump_transitions))
        # switching constraint pins the position at the jump node
        assert abs(traj.states[jump_node][0] - 0.4) < 1e-8


class TestSolve:
    def test_unconstrained_lq_equals_lqr(self):
        a = np.array([[1.0, DT], [0.0, 1.0]])
        b = np.array([[0.0], [DT]])
        q = np.diag([1.0, 0.1])
        r = np.array([[0.5]])
        p_inf, k_inf = dare_fixed_point(a, b, q, r)
        prob = _lq_problem(n=25, q=q, r=r, terminal_q=p_inf)
        x0 = np.array([1.0, 0.0])
        traj, diag = solve(prob, _zero_unc(), x_init=x0)
        assert diag.converged
        x = x0.copy()
        for i in range(25):
            u = k_inf @ x
            np.testing.assert_allclose(traj.inputs[i], u, atol=1e-8)
            x = a @ x + b @ u
            np.testing.assert_allclose(traj.states[i + 1], x, atol=1e-8)
        for i in range(25):
            np.testing.assert_allclose(traj.gains[i], k_inf, atol=1e-6)

    def test_kkt_monotone_on_lq_with_full_steps(self):
        con_u = input_box("ubox", -5.0, 5.0, 1)
        prob = _lq_problem(n=15, path_constraints=[con_u],
                           x_ref=lambda t: np.array([0.5, 0.0]))
        state = transcribe(prob, np.array([-0.5, 0.2]))
        opts = _zero_unc(merit_backtracking=False)
        residuals = []
        for _ in range(12):
            info = iterate(state, opts)
            residuals.append(info["kkt"])
            assert info["alpha"] > 0.9
        for r0, r1 in zip(residuals, residuals[1:]):
            assert r1 <= r0 + 1e-12

    def test_active_input_dual_matches_qp_oracle(self):
        # min 0.5 (u - 2)^2 s.t. u <= 1: active-set solution u* = 1, dual = 1
        model = double_integrator_model()
        sched = _di_schedule(1)
        stage = StageCost(q=np.zeros((2, 2)), r=np.eye(1), x_ref=lambda t: np.zeros(2),
                          u_ref=lambda t: np.array([2.0]))
        prob = OcpProblem(model=model, schedule=sched, stage_cost=stage,
                          terminal_cost=StateCost(q=np.zeros((2, 2)),
                                                  x_ref=lambda t: np.zeros(2)),
                          path_constraints=[input_box("ub", -np.inf, 1.0, 1)])
        opts = _zero_unc(mu=1e-2, mu_schedule="reduce", mu_min=1e-9, max_iters=60,
                         kkt_tol=1e-9)
        state = transcribe(prob, np.zeros(2))
        traj, diag = solve(prob, opts, state=state)
        assert abs(traj.inputs[0][0] - 1.0) < 1e-4
        # interior-point dual of the active row approaches the QP multiplier
        assert abs(state.duals[0][0] - 1.0) < 1e-3

    def test_zero_uncertainty_equivalence_biped(self):
        gait = build_walk_gait(n_steps=4)
        model = biped_model(gait)
        prob = biped_problem(gait, model, t0_index=4, horizon_nodes=30, dt=0.02)
        x0 = np.array([0.0, 0.0, 0.96, 0.25, 0.0, 0.0])
        zero_w = np.zeros((3, 3))
        opts_s = SolveOptions(jump_rule="saltation", backoff_source="covariance",
                              guard_cov_override=0.0, w_flow_override=zero_w,
                              max_iters=6)
        opts_n = SolveOptions(jump_rule="saltation", backoff_source="none",
                              guard_cov_override=0.0, w_flow_override=zero_w,
                              max_iters=6)
        state_s = transcribe(prob, x0)
        state_n = transcribe(prob, x0)
        for _ in range(6):
            iterate(state_s, opts_s)
            iterate(state_n, opts_n)
            assert np.all(state_s.states == state_n.states)
            for us, un in zip(state_s.inputs, state_n.inputs):
                if us is not None:
                    assert np.all(us == un)

    def test_unconverged_flagged(self):
        prob = _lq_problem(n=10, x_ref=lambda t: np.array([2.0, 0.0]))
        traj, diag = solve(prob, _zero_unc(max_iters=1), x_init=np.array([0.0, 0.0]))
        assert not diag.converged
        assert diag.iterations == 1

    def test_active_bound_margin_equals_backoff(self):
        con = LinearConstraint(name="pos-ub", cx=np.array([[-1.0, 0.0]]),
                               d=np.array([0.5]), soft=True,
                               backoff=BackoffSpec(gamma=1.0, clip_max=10.0))
        prob = _lq_problem(n=20, q=np.diag([4.0, 0.4]),
                           x_ref=lambda t: np.array([1.0, 0.0]),
                           path_constraints=[con], event_constraints=[con])
        # the backoff feedback converges linearly (zero-order), so the tail
        # needs a generous iteration budget at the offline tolerance
        opts = SolveOptions(p0=1e-4 * np.eye(2),
                            w_flow_override=np.array([[1e-5]]),
                            guard_cov_override=0.0,
                            max_iters=400, kkt_tol=1e-6)
        traj, diag = solve(prob, opts, x_init=np.zeros(2))
        assert diag.converged
        # recompute the covariance pass at the solution to read beta
        state = transcribe(prob, np.zeros(2))
        state.states = traj.states.copy()
        state.inputs = [None if u is None else u.copy() for u in traj.inputs]
        state.gains = [None if k is None else k.copy() for k in traj.gains]
        _, backoffs, _ = covariance_pass(state, prob, opts)
        margins = [0.5 - traj.states[i][0] for i in range(len(traj.states))]
        idx = int(np.argmin(margins))
        beta = backoffs[idx][0]
        assert beta > 1e-4
        # active node sits at the tightened boundary up to the soft-barrier
        # equilibrium offset (soft_weight / constraint pull)
        assert abs(margins[idx] - beta) < 1e-3


class TestLineSearch:
    def test_full_step_far_from_boundary(self):
        con_u = input_box("ubox", -100.0, 100.0, 1)
        prob = _lq_problem(n=8, path_constraints=[con_u])
        state = transcribe(prob, np.array([0.1, 0.0]))
        opts = _zero_unc(merit_backtracking=False)
        info = iterate(state, opts)
        assert info["alpha"] == 1.0

    def test_fraction_to_boundary_arithmetic(self):
        # slack direction crossing zero at 0.4 caps the step at 0.4 * tau
        from saltmpc.riccati import RiccatiSolution
        con_u = input_box("ubox", -1.0, np.inf, 1)
        prob = _lq_problem(n=1, path_constraints=[con_u])
        state = transcribe(prob, np.zeros(2))
        opts = _zero_unc(merit_backtracking=False)
        evals = _evaluate_nodes(state)
        covs, backoffs, _ = covariance_pass(state, prob, opts, evals)
        state.covs, state.backoffs = covs, backoffs
        from saltmpc.ocp import _init_slacks
        _init_slacks(state, evals, backoffs)
        s0 = state.slacks[0][0]
        # craft a direction that drives the slack to zero at alpha = 0.4
        du = -s0 / 0.4  # slack row for lower bound: h = u + 1, ds = du
        sol = RiccatiSolution(
            dxs=np.zeros((2, 2)), dus=[np.array([du]), None],
            gains=[np.zeros((1, 2)), None], kff=[np.zeros(1), None],
            lambdas=np.zeros((2, 2)), nu=np.zeros(0), nu_slices={},
            value_p=[np.zeros((2, 2))] * 2, value_s=[np.zeros(2)] * 2)
        alpha, _, _ = line_search(state, evals, backoffs, sol, opts)
        assert abs(alpha - 0.4 * opts.tau) < 1e-12

    def test_step_sizes_logged(self):
        prob = _lq_problem(n=6)
        traj, diag = solve(prob, _zero_unc(max_iters=4), x_init=np.array([0.5, 0.0]))
        assert len(diag.step_sizes) == diag.iterations


class TestCovariancePassIntegration:
    def test_zero_uncertainty_zero_backoffs(self):
        con = LinearConstraint(name="pos", cx=np.array([[1.0, 0.0]]),
                               d=np.array([1.0]), soft=True,
                               backoff=BackoffSpec(gamma=1.0))
        prob = _lq_problem(n=6, path_constraints=[con])
        state = transcribe(prob, np.zeros(2))
        opts = _zero_unc()
        covs, backoffs, info = covariance_pass(state, prob, opts)
        assert all(np.all(p == 0.0) for p in covs)
        assert all(np.all(b == 0.0) for b in backoffs)

    def test_margin_source(self):
        con = LinearConstraint(name="pos", cx=np.array([[1.0, 0.0]]),
                               d=np.array([1.0]), soft=True,
                               backoff=BackoffSpec(gamma=1.0))
        prob = _lq_problem(n=4, path_constraints=[con])
        state = transcribe(prob, np.zeros(2))
        opts = SolveOptions(backoff_source="margins", margins={"pos": 0.07},
                            guard_cov_override=0.0,
                            w_flow_override=np.zeros((1, 1)))
        _, backoffs, _ = covariance_pass(state, prob, opts)
        assert all(abs(b[0] - 0.07) < 1e-15 for b in backoffs[:4])

    def test_jump_rule_changes_only_jump_nodes(self):
        prob = _lq_problem(n=8, jump_at=4)
        state = transcribe(prob, np.array([0.0, 0.5]))
        opts_a = SolveOptions(jump_rule="saltation", p0=0.01 * np.eye(2),
                              guard_cov_override=1e-3,
                              w_flow_override=np.zeros((1, 1)))
        opts_c = dataclasses.replace(opts_a, jump_rule="dynamics",
                                     w_jump_override=np.array([[1e-3]]))
        covs_a, _, _ = covariance_pass(state, prob, opts_a)
        covs_c, _, _ = covariance_pass(state, prob, opts_c)
        jump_node = next(iter(prob.schedule.jump_transitions))
        for n in range(jump_node + 1):
            np.testing.assert_allclose(covs_a[n], covs_c[n], atol=1e-15)
        assert np.max(np.abs(covs_a[jump_node + 1] - covs_c[jump_node + 1])) > 1e-8


class TestFlowNodePosterior:
    def test_flag_contracts_covariance_after_events(self):
        prob = _lq_problem(n=10, jump_at=4)
        state = transcribe(prob, np.array([0.0, 0.5]))
        base = SolveOptions(jump_rule="saltation", p0=0.01,
                            guard_cov_override=1e-3,
                            w_flow_override=1e-4)
        on = dataclasses.replace(base, posterior_at_flow_nodes=True)
        covs_off, _, _ = covariance_pass(state, prob, base)
        covs_on, _, _ = covariance_pass(state, prob, on)
        jump_node = next(iter(prob.schedule.jump_transitions))
        # before the event the flag has no effect; afterwards it contracts
        for n in range(jump_node + 1):
            np.testing.assert_allclose(covs_on[n], covs_off[n], atol=1e-15)
        assert np.trace(covs_on[-1]) < np.trace(covs_off[-1])
