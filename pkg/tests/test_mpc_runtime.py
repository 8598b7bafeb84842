import dataclasses

import numpy as np
import pytest

from saltmpc import ModeSchedule, OcpProblem, StageCost, StateCost
from saltmpc.benchmarks import build_walk_gait, double_integrator_model
from saltmpc.mpc_runtime import (
    BipedExperiment,
    MpcConfig,
    MpcController,
    PlantSimulator,
    benchmark_iterations,
    covariance_forecast_experiment,
    match_baseline_sigma,
    monte_carlo_compare,
    run_biped_rollout,
    sample_offsets,
)

DT = 0.05


def _di_factory(x_ref):
    model = double_integrator_model()

    def factory(t0_index):
        t0 = t0_index * DT
        times = t0 + DT * np.arange(13)
        sched = ModeSchedule(times=times, interval_modes=(0,) * 12,
                             jump_transitions={})
        stage = StageCost(q=np.diag([2.0, 0.5]), r=np.array([[0.2]]), x_ref=x_ref)
        return OcpProblem(model=model, schedule=sched, stage_cost=stage,
                          terminal_cost=StateCost(q=np.diag([4.0, 1.0]), x_ref=x_ref))

    return factory


class TestMpcStep:
    def test_stationary_reference_steady_input(self):
        ref = lambda t: np.array([0.7, 0.0])
        config = MpcConfig(variant="mpc", dt=DT, warmup_iters=60)
        controller = MpcController(_di_factory(ref), config)
        x = np.array([0.7, 0.0])
        u_prev = None
        for step in range(6):
            u, gain, diag = controller.step(step, x)
            if u_prev is not None:
                assert np.max(np.abs(u - u_prev)) < 1e-8
            u_prev = u.copy()
        assert np.max(np.abs(u_prev)) < 1e-6

    def test_impulse_decay_spectral_radius(self):
        ref = lambda t: np.zeros(2)
        config = MpcConfig(variant="mpc", dt=DT, warmup_iters=60)
        controller = MpcController(_di_factory(ref), config)
        _, gain, _ = controller.step(0, np.zeros(2))
        a = np.array([[1.0, DT], [0.0, 1.0]])
        b = np.array([[0.0], [DT]])
        radius = np.max(np.abs(np.linalg.eigvals(a + b @ gain)))
        assert radius < 1.0

    def test_warmstart_reduces_kkt_on_biped(self):
        exp = BipedExperiment()
        cfg_warm = MpcConfig(variant="gs-smpc")
        from saltmpc.mpc_runtime import _build_biped_stack
        gait, model, task, warm, factory = _build_biped_stack(cfg_warm, exp)
        x = np.array(gait.path(0.0))
        for step in range(4):
            _, _, diag_warm = warm.step(step, x)
        cfg_cold = dataclasses.replace(cfg_warm, warmup_iters=1)
        _, _, cold2 = _build_biped_stack(cfg_cold, exp)[3], None, None
        cold = MpcController(factory, cfg_cold)
        _, _, diag_cold = cold.step(4, x)
        assert diag_warm["kkt"] < diag_cold["kkt"]

    def test_stored_gains_feed_next_warmstart(self):
        exp = BipedExperiment()
        cfg = MpcConfig(variant="gs-smpc")
        from saltmpc.mpc_runtime import _build_biped_stack
        gait, model, task, controller, factory = _build_biped_stack(cfg, exp)
        x = np.array(gait.path(0.0))
        controller.step(0, x)
        assert controller.stored is not None
        guess = controller._warmstart(factory(1), x)
        flow_gains = [g for g in guess.gains if g is not None]
        assert flow_gains and all(np.max(np.abs(g)) > 0.0 for g in flow_gains)

    def test_failure_replays_previous_input(self):
        ref = lambda t: np.array([0.7, 0.0])
        config = MpcConfig(variant="mpc", dt=DT, warmup_iters=30)
        factory = _di_factory(ref)
        controller = MpcController(factory, config)
        x = np.array([0.7, 0.0])
        u0, _, _ = controller.step(0, x)

        def broken(t0_index):
            from saltmpc.errors import ScheduleError
            raise ScheduleError("window construction failed")

        controller.factory = broken
        u1, _, diag = controller.step(1, x)
        assert diag["failed"]
        assert np.all(u1 == u0)


class TestClosedLoop:
    def test_nominal_contact_times_within_substep(self):
        exp = BipedExperiment(duration=1.2)
        cfg = MpcConfig(variant="gs-smpc", compute_kkt=False)
        rec = run_biped_rollout(cfg, exp, offsets={})
        assert rec.outcome == "success"
        gait = build_walk_gait(dt=cfg.dt, n_steps=exp.n_steps, speed=exp.speed,
                               params=exp.params, guard_cov=cfg.guard_cov)
        planned = [e.time for e in gait.events if e.time < exp.duration]
        assert len(rec.events) == len(planned)
        for (t_ev, _, _), t_plan in zip(rec.events, planned):
            assert abs(t_ev - t_plan) <= exp.substep + 1e-9

    def test_positive_offset_delays_contact(self):
        exp = BipedExperiment(duration=0.9)
        cfg = MpcConfig(variant="gs-smpc", compute_kkt=False)
        rec = run_biped_rollout(
            cfg, exp, offsets={"td-left": np.array([0.03])})
        t_first = rec.events[0][0]
        assert t_first > 0.36 + 0.01

    def test_negative_offset_advances_contact(self):
        exp = BipedExperiment(duration=0.9)
        cfg = MpcConfig(variant="gs-smpc", compute_kkt=False)
        rec = run_biped_rollout(
            cfg, exp, offsets={"td-left": np.array([-0.03])})
        assert rec.events[0][0] < 0.36 - 0.01

    def test_guard_residual_small_at_detection(self):
        exp = BipedExperiment(duration=1.2)
        cfg = MpcConfig(variant="gs-smpc", compute_kkt=False)
        rec = run_biped_rollout(cfg, exp,
                                offsets=sample_offsets(3, 0, exp.offset_range))
        assert rec.events
        for _, _, residual in rec.events:
            assert residual <= 1e-6

    def test_seeded_rollout_bit_reproducible(self):
        exp = BipedExperiment(duration=0.8)
        cfg = MpcConfig(variant="gs-smpc", compute_kkt=False)
        offs = sample_offsets(11, 4, exp.offset_range)
        rec1 = run_biped_rollout(cfg, exp, offs)
        rec2 = run_biped_rollout(cfg, exp, offs)
        assert np.all(rec1.states == rec2.states)
        assert np.all(rec1.inputs == rec2.inputs)
        assert rec1.events == rec2.events
        assert rec1.outcome == rec2.outcome


class TestVariants:
    def test_variant_isolation(self):
        # variants may differ only in the jump-covariance rule and the
        # backoff source (incl. the uncertainty parameters feeding them)
        allowed = {"jump_rule", "backoff_source", "margins", "guard_cov_override",
                   "w_flow_override", "w_jump_override", "p0"}
        base = dataclasses.asdict(MpcConfig(variant="gs-smpc").solve_options(5))
        for variant in ("smpc", "hmpc", "mpc"):
            other = dataclasses.asdict(MpcConfig(variant=variant).solve_options(5))
            for key, value in base.items():
                if key in allowed:
                    continue
                ov = other[key]
                if isinstance(value, np.ndarray) or isinstance(ov, np.ndarray):
                    assert np.array_equal(value, ov), key
                else:
                    assert value == ov, key

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            MpcConfig(variant="lqg")

    def test_zero_disturbance_all_variants_succeed(self):
        exp = BipedExperiment(duration=1.2)
        for variant in ("gs-smpc", "smpc", "hmpc", "mpc"):
            kw = {"margins": {"height-min": 0.01, "height-max": 0.01}} \
                if variant == "hmpc" else {}
            cfg = MpcConfig(variant=variant, compute_kkt=False, **kw)
            rec = run_biped_rollout(cfg, exp, offsets={})
            assert rec.outcome == "success", variant


class TestMonteCarlo:
    def test_rejects_no_envs(self):
        with pytest.raises(ValueError):
            monte_carlo_compare([MpcConfig(variant="mpc")], BipedExperiment(), 0, 1)

    def test_single_env_no_disturbance_succeeds(self):
        exp = BipedExperiment(duration=1.0, offset_range=0.0)
        results = monte_carlo_compare(
            [MpcConfig(variant=v, compute_kkt=False) for v in ("gs-smpc", "mpc")],
            exp, n_envs=1, seed=0)
        assert all(r.success_rate == 1.0 for r in results)

    def test_offsets_shared_across_variants_and_seeded(self):
        a = sample_offsets(5, 2, 0.04)
        b = sample_offsets(5, 2, 0.04)
        for key in a:
            assert np.all(a[key] == b[key])
            assert np.all(np.abs(a[key]) <= 0.04)


class TestForecastExperiment:
    def test_table_structure_and_overgrowth(self):
        cells = covariance_forecast_experiment(
            ["forward"], c_g_values=[1e-4, 1e-3], sigma_values=[1e-3, 1e-2],
            horizon_nodes=75)
        assert len(cells) == 6
        by = {(c.method, c.sweep_value): c for c in cells}
        assert all(not c.error for c in cells)
        assert by[("b", 1e-3)].terminal_trace > by[("a", 1e-3)].terminal_trace
        for c in cells:
            assert c.terminal_diag.shape == (6,)

    def test_match_baseline_sigma_affine(self):
        cells = covariance_forecast_experiment(
            ["forward"], c_g_values=[1e-3], sigma_values=[1e-3, 1e-2],
            horizon_nodes=60)
        target = next(c for c in cells if c.method == "a").terminal_trace
        sigma = match_baseline_sigma(cells, "forward", target)
        assert sigma > 0.0


class TestBench:
    def test_iteration_samples_shape(self):
        from saltmpc.benchmarks import biped_model, biped_problem
        gait = build_walk_gait(n_steps=6)
        model = biped_model(gait)
        prob = biped_problem(gait, model, t0_index=4, horizon_nodes=20, dt=0.02)
        opts = MpcConfig(variant="gs-smpc").solve_options(1)
        samples = benchmark_iterations(prob, opts, np.array(gait.path(0.08)),
                                       repetitions=5, warm_iters=3)
        assert samples.shape == (5,)
        assert np.all(samples > 0.0)


class TestPlantNoise:
    def test_seeded_process_noise_reproducible(self):
        from saltmpc.mpc_runtime import PlantSimulator, simulate_closed_loop
        from saltmpc.mpc_runtime import _build_biped_stack
        exp = BipedExperiment(duration=0.6)
        cfg = MpcConfig(variant="mpc", compute_kkt=False)

        def rollout(seed):
            gait, model, task, controller, factory = _build_biped_stack(cfg, exp)
            plant = PlantSimulator(model=model, gait=gait, guard_offsets={},
                                   substep=exp.substep, u_limits=task.u_max,
                                   noise_cov=1e-6 * np.eye(3), seed=seed)
            return simulate_closed_loop(controller, plant, exp.duration)

        rec1, rec2, rec3 = rollout(5), rollout(5), rollout(6)
        assert np.all(rec1.states == rec2.states)
        assert np.any(rec1.states != rec3.states)


class TestHmpcCalibration:
    def test_margins_from_gs_backoffs(self):
        from saltmpc.mpc_runtime import calibrate_hmpc_margins
        exp = BipedExperiment()
        margins = calibrate_hmpc_margins(MpcConfig(variant="hmpc"), exp)
        assert "height-min" in margins
        assert 1e-4 < margins["height-min"] < 0.1


class TestMotionDependence:
    def test_curve_and_ascent_redistribute_covariance(self):
        cells = covariance_forecast_experiment(
            ["forward", "curve", "step-ascent"], c_g_values=[1e-3],
            sigma_values=[], horizon_nodes=75)
        by = {(c.motion, c.method): c for c in cells}
        fwd = dict(zip(("x", "y", "z", "vx", "vy", "vz"),
                       by[("forward", "a")].terminal_diag))
        curve = dict(zip(("x", "y", "z", "vx", "vy", "vz"),
                         by[("curve", "a")].terminal_diag))
        ascent = dict(zip(("x", "y", "z", "vx", "vy", "vz"),
                          by[("step-ascent", "a")].terminal_diag))
        # curvilinear motion grows lateral covariance beyond forward walking
        assert curve["y"] + curve["vy"] > fwd["y"] + fwd["vy"]
        # ascending a step grows vertical position covariance beyond forward
        assert ascent["z"] > fwd["z"]
