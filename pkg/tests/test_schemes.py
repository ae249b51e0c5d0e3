import types

import numpy as np
import pytest

from dbrsolver.core import ProblemSpec, TimeGrid
from dbrsolver.neuralnet import forward_batch, init_xavier
from dbrsolver.paths import (
    PURPOSE_BRANCH,
    PURPOSE_INIT_Y,
    PURPOSE_INIT_Z,
    PURPOSE_OUTER,
    RngStream,
    sample_branches,
    simulate_forward,
)
from dbrsolver.problems import american_put, example1, linear_toy
from dbrsolver.schemes import (
    SchemeSolution,
    TrainConfig,
    compute_step_targets,
    dbdp1_solve,
    dbr_solve,
    evaluate_y_next,
    rdbr_solve,
    train_y_step,
    train_z_step,
    _time_inputs,
)


def small_cfg(**kw):
    base = dict(hidden=(12,), branches=8, outer=64, batch=32, iterations=60,
                learning_rate=2e-3)
    base.update(kw)
    return TrainConfig(**base)


def make_decay_problem(rate):
    """d = 1 toy whose driver is -rate * y; drift/diffusion are unused here."""
    return ProblemSpec(
        name="decay",
        dim=1,
        drift=lambda t, X: np.zeros_like(X),
        diffusion=lambda t, X: np.ones((X.shape[0], 1, 1)),
        generator=lambda t, X, Y, Z: -rate * Y,
        terminal=lambda X: X[:, 0],
        x0=np.zeros(1),
    )


class TestEvaluateYNext:
    def setup_method(self):
        self.prob = linear_toy(2)
        self.grid = TimeGrid(1.0, 3)
        self.sol = SchemeSolution(
            scheme="dbr", grid=self.grid, problem=self.prob,
            y_nets=[None] * 3, z_nets=[None] * 3,
        )

    def test_terminal_is_exact(self):
        pts = np.random.default_rng(0).normal(size=(9, 2))
        got = evaluate_y_next(self.sol, self.prob, 3, pts)
        assert (got == self.prob.terminal(pts)).all()

    def test_zero_network_outputs_zero(self):
        net = init_xavier([3, 4, 1], RngStream(seed=1))
        for w in net.weights:
            w[:] = 0.0
        self.sol.y_nets[1] = net
        pts = np.random.default_rng(1).normal(size=(5, 2))
        assert (evaluate_y_next(self.sol, self.prob, 1, pts) == 0.0).all()

    def test_reflection_clips_to_obstacle(self):
        prob = american_put(36, 40, 0.06, 0.2, 1.0)
        sol = SchemeSolution(
            scheme="rdbr", grid=self.grid, problem=prob,
            y_nets=[None] * 3, z_nets=[None] * 3, reflected=True,
        )
        net = init_xavier([2, 4, 1], RngStream(seed=2))
        for w in net.weights:
            w[:] = 0.0
        net.biases[-1][:] = -50.0  # network everywhere below the payoff
        sol.y_nets[2] = net
        pts = np.linspace(20.0, 39.0, 7)[:, None]
        got = evaluate_y_next(sol, prob, 2, pts)
        assert got == pytest.approx(prob.obstacle(pts))

    def test_untrained_network_rejected(self):
        with pytest.raises(ValueError, match="not been trained"):
            evaluate_y_next(self.sol, self.prob, 1, np.zeros((2, 2)))

    def test_index_bounds(self):
        with pytest.raises(IndexError):
            evaluate_y_next(self.sol, self.prob, 0, np.zeros((1, 2)))
        with pytest.raises(IndexError):
            evaluate_y_next(self.sol, self.prob, 4, np.zeros((1, 2)))


class TestComputeStepTargets:
    def test_constant_next_value_averages_exactly(self):
        prob = linear_toy(2)
        grid = TimeGrid(1.0, 4)
        ens = simulate_forward(prob, grid, 16, RngStream(seed=3))
        br = sample_branches(prob, grid, ens, 1, 5, RngStream(seed=3, step=1))
        c = 0.73
        tg = compute_step_targets(prob, grid, 1, ens.states[:, 1], br,
                                  lambda pts: np.full(len(pts), c))
        assert (tg.y_base == c).all()

    def test_quadratic_variation_grand_mean(self):
        # frozen outer states at 0 make the z target a pure (dW)^2 / h average
        prob = linear_toy(1)
        grid = TimeGrid(1.0, 10)
        m, k = 2000, 50  # m * k = 1e5
        states = np.zeros((m, grid.steps + 1, 1))
        ens = types.SimpleNamespace(states=states, n_paths=m, n_steps=grid.steps)
        br = sample_branches(prob, grid, ens, grid.steps - 1, k,
                             RngStream(seed=4, step=grid.steps - 1, purpose=PURPOSE_BRANCH))
        tg = compute_step_targets(prob, grid, grid.steps - 1, states[:, -2], br,
                                  lambda pts: pts[:, 0])
        grand = tg.z_target.mean()
        assert abs(grand - 1.0) <= 4 * np.sqrt(2.0 / (m * k))

    def test_martingale_y_base_mean(self):
        prob = linear_toy(1)
        grid = TimeGrid(1.0, 10)
        m, k = 4000, 16
        ens = simulate_forward(prob, grid, m, RngStream(seed=5))
        i = 6
        br = sample_branches(prob, grid, ens, i, k, RngStream(seed=5, step=i, purpose=PURPOSE_BRANCH))
        tg = compute_step_targets(prob, grid, i, ens.states[:, i], br,
                                  lambda pts: pts[:, 0])
        diff = tg.y_base.mean() - ens.states[:, i, 0].mean()
        se = np.sqrt(grid.h / (m * k))
        assert abs(diff) <= 4 * se

    def test_degenerate_h_rejected(self):
        prob = linear_toy(1)
        grid = TimeGrid(1.0, 2)
        ens = simulate_forward(prob, grid, 4, RngStream(seed=6))
        br = sample_branches(prob, grid, ens, 0, 3, RngStream(seed=6))
        flat = types.SimpleNamespace(h=0.0, steps=2, node=lambda i: 0.0)
        with pytest.raises(ValueError, match="h"):
            compute_step_targets(prob, flat, 0, ens.states[:, 0], br, lambda p: p[:, 0])


class TestTrainZStep:
    def test_zero_iterations_returns_xavier_init(self):
        rng = np.random.default_rng(7)
        inputs = rng.normal(size=(40, 3))
        targets = rng.normal(size=(40, 2))
        cfg = small_cfg(iterations=0, outer=40, batch=16)
        stream = RngStream(seed=8, step=2)
        net = train_z_step(inputs, targets, cfg, stream)
        ref = init_xavier((3, 12, 2), stream.with_purpose(PURPOSE_INIT_Z))
        for a, b in zip(net.weights, ref.weights):
            assert (a == b).all()

    def test_constant_target_regression(self):
        rng = np.random.default_rng(9)
        inputs = np.concatenate([np.full((256, 1), 0.3), rng.uniform(-1, 1, (256, 2))], axis=1)
        targets = np.full((256, 2), 0.5)
        cfg = TrainConfig(hidden=(64,), branches=1, outer=256, batch=256,
                          iterations=2000, learning_rate=5e-4)
        net = train_z_step(inputs, targets, cfg, RngStream(seed=10))
        preds = forward_batch(net, inputs)
        assert np.abs(preds - 0.5).max() <= 0.05

    def test_loss_decreases_on_benchmark_step(self):
        prob = example1(3)
        grid = TimeGrid(1.0, 10)
        ens = simulate_forward(prob, grid, 128, RngStream(seed=11, purpose=PURPOSE_OUTER))
        i = grid.steps - 1
        br = sample_branches(prob, grid, ens, i, 8, RngStream(seed=11, step=i, purpose=PURPOSE_BRANCH))
        tg = compute_step_targets(prob, grid, i, ens.states[:, i], br, prob.terminal)
        rec = {}
        train_z_step(_time_inputs(grid.node(i), ens.states[:, i]), tg.z_target,
                     small_cfg(outer=128, batch=64, iterations=300), RngStream(seed=11, step=i), record=rec)
        assert rec["final_loss"] <= rec["initial_loss"]
        assert rec["final_loss"] >= 0.0


class TestTrainYStep:
    def test_zero_iterations_returns_init(self):
        rng = np.random.default_rng(12)
        inputs = rng.normal(size=(32, 2))
        y_base = rng.normal(size=32)
        z_net = init_xavier((2, 4, 1), RngStream(seed=13))
        cfg = small_cfg(iterations=0, outer=32, batch=16)
        stream = RngStream(seed=14)
        net = train_y_step(inputs, y_base, z_net, make_decay_problem(0.0), 0.0, 0.1, cfg, stream)
        ref = init_xavier((2, 12, 1), stream.with_purpose(PURPOSE_INIT_Y))
        for a, b in zip(net.weights, ref.weights):
            assert (a == b).all()

    def test_driver_free_reduces_to_regression(self):
        rng = np.random.default_rng(15)
        inputs = np.concatenate([np.zeros((200, 1)), rng.uniform(-1, 1, (200, 1))], axis=1)
        y_base = np.full(200, 0.8)
        z_net = init_xavier((2, 8, 1), RngStream(seed=16))
        cfg = TrainConfig(hidden=(32,), branches=1, outer=200, batch=100,
                          iterations=2500, learning_rate=2e-3)
        net = train_y_step(inputs, y_base, z_net, make_decay_problem(0.0), 0.0, 0.1,
                           cfg, RngStream(seed=17))
        preds = forward_batch(net, inputs)[:, 0]
        assert np.abs(preds - 0.8).max() <= 0.02

    def test_implicit_driver_fixed_point(self):
        # with f = -r y and constant labels c the constant minimizer solves
        # v = c - h r v, i.e. v = c / (1 + r h)
        r, h, c = 0.06, 0.02, 1.0
        rng = np.random.default_rng(18)
        inputs = np.concatenate([np.zeros((200, 1)), rng.normal(size=(200, 1))], axis=1)
        z_net = init_xavier((2, 8, 1), RngStream(seed=19))
        cfg = TrainConfig(hidden=(32,), branches=1, outer=200, batch=100,
                          iterations=3000, learning_rate=2e-3)
        net = train_y_step(inputs, np.full(200, c), z_net, make_decay_problem(r), 0.0, h,
                           cfg, RngStream(seed=20))
        preds = forward_batch(net, inputs)[:, 0]
        want = c / (1.0 + r * h)
        assert np.abs(preds.mean() - want) <= 0.01 * want

    def test_nonfinite_driver_names_sample(self):
        def bad_gen(t, X, Y, Z):
            out = np.zeros_like(Y)
            out[:] = np.where(X[:, 0] > 1e12, np.inf, 0.0)
            return out

        prob = ProblemSpec(
            name="bad", dim=1,
            drift=lambda t, X: np.zeros_like(X),
            diffusion=lambda t, X: np.ones((X.shape[0], 1, 1)),
            generator=lambda t, X, Y, Z: np.full_like(Y, np.nan),
            terminal=lambda X: X[:, 0],
            x0=np.zeros(1),
        )
        rng = np.random.default_rng(21)
        inputs = rng.normal(size=(16, 2))
        z_net = init_xavier((2, 4, 1), RngStream(seed=22))
        with pytest.raises(FloatingPointError, match="sample"):
            train_y_step(inputs, np.zeros(16), z_net, prob, 0.0, 0.1,
                         small_cfg(outer=16, batch=8, iterations=5), RngStream(seed=23))


class TestTargetCachingEquivalence:
    def test_cached_loss_matches_recomputed_labels(self):
        prob = linear_toy(2)
        grid = TimeGrid(1.0, 4)
        ens = simulate_forward(prob, grid, 32, RngStream(seed=24))
        i = 2
        br = sample_branches(prob, grid, ens, i, 6, RngStream(seed=24, step=i))
        y_next = lambda pts: prob.terminal(pts)
        tg = compute_step_targets(prob, grid, i, ens.states[:, i], br, y_next)
        net = init_xavier((3, 8, 2), RngStream(seed=25))
        inputs = _time_inputs(grid.node(i), ens.states[:, i])
        preds = forward_batch(net, inputs)
        cached = np.mean(np.sum((tg.z_target - preds) ** 2, axis=1))
        # recompute the labels from scratch, as if done inside the SGD loop
        vals = y_next(br.next_states.reshape(-1, 2)).reshape(32, 6)
        labels = np.einsum("mk,mkj->mj", vals, br.increments) / (6 * grid.h)
        direct = np.mean(np.sum((labels - preds) ** 2, axis=1))
        assert abs(cached - direct) <= 1e-12 * max(1.0, abs(direct))


class TestSolvers:
    def test_seed_determinism(self):
        prob = linear_toy(2)
        grid = TimeGrid(1.0, 3)
        cfg = small_cfg()
        a = dbr_solve(prob, grid, cfg, RngStream(seed=26))
        b = dbr_solve(prob, grid, cfg, RngStream(seed=26))
        assert a.estimate == b.estimate
        assert a.step_records == b.step_records

    def test_single_step_collapse_matches_inner_average(self):
        prob = linear_toy(2)
        grid = TimeGrid(1.0, 1)
        cfg = TrainConfig(hidden=(32,), branches=64, outer=256, batch=128,
                          iterations=2500, learning_rate=2e-3)
        stream = RngStream(seed=27)
        res = dbr_solve(prob, grid, cfg, stream)
        # replay the solver's own draws to recover the pooled inner average
        ens = simulate_forward(prob, grid, 256, stream.with_step(0).with_purpose(PURPOSE_OUTER))
        br = sample_branches(prob, grid, ens, 0, 64, stream.with_step(0).with_purpose(PURPOSE_BRANCH))
        pooled = prob.terminal(br.next_states.reshape(-1, 2)).mean()
        assert abs(res.estimate - pooled) <= 0.05

    def test_dbdp1_seed_determinism(self):
        prob = linear_toy(2)
        grid = TimeGrid(1.0, 3)
        cfg = small_cfg()
        a = dbdp1_solve(prob, grid, cfg, RngStream(seed=28))
        b = dbdp1_solve(prob, grid, cfg, RngStream(seed=28))
        assert a.estimate == b.estimate

    def test_dbdp1_single_step_noiseless_degenerate(self):
        # sigma = 0 and f = 0: the label is g(x0 + mu h) exactly, so the
        # trained value network must match it at the (deterministic) state
        prob = ProblemSpec(
            name="det", dim=1,
            drift=lambda t, X: np.full_like(X, 0.5),
            diffusion=lambda t, X: np.zeros((X.shape[0], 1, 1)),
            diffusion_matvec=lambda t, X, V: np.zeros_like(V),
            generator=lambda t, X, Y, Z: np.zeros_like(Y),
            terminal=lambda X: X[:, 0],
            x0=np.zeros(1),
        )
        grid = TimeGrid(1.0, 1)
        cfg = TrainConfig(hidden=(16,), branches=1, outer=64, batch=32,
                          iterations=2500, learning_rate=2e-3)
        res = dbdp1_solve(prob, grid, cfg, RngStream(seed=29))
        assert abs(res.estimate - 0.5) <= 0.02

    def test_resample_and_warm_start_modes_run(self):
        prob = linear_toy(1)
        grid = TimeGrid(1.0, 3)
        cfg = small_cfg(warm_start=True, resample_outer=True, input_scaling=True)
        res = dbr_solve(prob, grid, cfg, RngStream(seed=30))
        assert np.isfinite(res.estimate)

    def test_stop_gradient_mode_runs(self):
        prob = example1(2)
        grid = TimeGrid(1.0, 3)
        res = dbr_solve(prob, grid, small_cfg(stop_gradient_generator=True), RngStream(seed=31))
        assert np.isfinite(res.estimate)

    def test_losses_recorded_per_step(self):
        prob = linear_toy(1)
        grid = TimeGrid(1.0, 4)
        res = dbr_solve(prob, grid, small_cfg(), RngStream(seed=32))
        assert len(res.step_records) == 4
        for rec in res.step_records:
            for v in (rec.z_initial, rec.z_final, rec.y_initial, rec.y_final):
                assert np.isfinite(v) and v >= 0.0


class TestReflectedSolver:
    def test_requires_obstacle(self):
        with pytest.raises(ValueError, match="obstacle"):
            rdbr_solve(linear_toy(1), TimeGrid(1.0, 2), small_cfg(), RngStream(seed=33))

    def test_inactive_obstacle_reproduces_plain_solver(self):
        base = linear_toy(2)
        guarded = ProblemSpec(
            name="toy_floor", dim=2,
            drift=base.drift, diffusion=base.diffusion,
            diffusion_matvec=base.diffusion_matvec,
            generator=base.generator, generator_dy=base.generator_dy,
            generator_dz=base.generator_dz,
            terminal=base.terminal, x0=base.x0,
            has_obstacle=True, obstacle=lambda X: np.full(X.shape[0], -1e9),
        )
        grid = TimeGrid(1.0, 3)
        cfg = small_cfg()
        plain = dbr_solve(base, grid, cfg, RngStream(seed=34))
        reflected = rdbr_solve(guarded, grid, cfg, RngStream(seed=34))
        assert reflected.estimate == plain.estimate
        assert reflected.step_records == plain.step_records

    def test_terminal_reflection_is_noop(self):
        prob = american_put(36, 40, 0.06, 0.2, 1.0)
        grid = TimeGrid(1.0, 2)
        res = rdbr_solve(prob, grid, small_cfg(), RngStream(seed=35))
        pts = np.linspace(5.0, 80.0, 40)[:, None]
        assert (res.solution.evaluate_y(grid.steps, pts) == prob.terminal(pts)).all()

    def test_obstacle_dominance_everywhere(self):
        prob = american_put(36, 40, 0.06, 0.2, 1.0)
        grid = TimeGrid(1.0, 4)
        res = rdbr_solve(prob, grid, small_cfg(), RngStream(seed=36))
        pts = np.linspace(1.0, 90.0, 64)[:, None]
        for i in range(grid.steps + 1):
            vals = res.solution.evaluate_y(i, pts)
            assert (vals >= prob.obstacle(pts)).all()


class TestLossAtOptimum:
    def test_trained_z_loss_matches_conditional_noise_floor(self):
        # d = 1 linear toy at the last step: the target's conditional mean is
        # the constant 1, so the attainable loss is the label noise variance,
        # estimated by binning the cloud and averaging within bins
        prob = linear_toy(1)
        grid = TimeGrid(1.0, 10)
        m, k = 4000, 64
        stream = RngStream(seed=37)
        ens = simulate_forward(prob, grid, m, stream.with_purpose(PURPOSE_OUTER))
        i = grid.steps - 1
        br = sample_branches(prob, grid, ens, i, k, stream.with_step(i).with_purpose(PURPOSE_BRANCH))
        tg = compute_step_targets(prob, grid, i, ens.states[:, i], br, lambda p: p[:, 0])
        x = ens.states[:, i, 0]
        order = np.argsort(x)
        resid = np.empty(m)
        bins = np.array_split(order, 50)
        for idx in bins:
            resid[idx] = tg.z_target[idx, 0] - tg.z_target[idx, 0].mean()
        noise_floor = float(np.mean(resid**2))
        rec = {}
        cfg = TrainConfig(hidden=(128,), branches=k, outer=m, batch=400,
                          iterations=1500, learning_rate=5e-4)
        train_z_step(_time_inputs(grid.node(i), ens.states[:, i]), tg.z_target,
                     cfg, stream.with_step(i), record=rec)
        assert abs(rec["final_loss"] - noise_floor) <= 0.2 * noise_floor
