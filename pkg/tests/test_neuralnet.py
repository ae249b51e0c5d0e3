import numpy as np
import pytest

from dbrsolver.neuralnet import (
    AdamState,
    GradBundle,
    MlpNetwork,
    adam_update,
    backward_batch,
    forward_batch,
    grad_check,
    init_xavier,
    load_network,
    save_network,
)
from dbrsolver.paths import RngStream


def zero_net(sizes):
    net = init_xavier(sizes, RngStream(seed=0))
    for w in net.weights:
        w[:] = 0.0
    return net


class TestInitXavier:
    def test_bound_and_zero_biases(self):
        net = init_xavier([3, 2], RngStream(seed=1))
        bound = np.sqrt(6.0 / 5.0)
        assert (np.abs(net.weights[0]) <= bound).all()
        assert (net.biases[0] == 0.0).all()

    def test_determinism(self):
        a = init_xavier([4, 8, 2], RngStream(seed=5, step=3))
        b = init_xavier([4, 8, 2], RngStream(seed=5, step=3))
        for wa, wb in zip(a.weights, b.weights):
            assert (wa == wb).all()

    def test_paper_architecture_shapes(self):
        # two hidden layers of d+110 units at d = 100, input (t, x)
        net = init_xavier([101, 210, 210, 1], RngStream(seed=2))
        assert [w.shape for w in net.weights] == [(210, 101), (210, 210), (1, 210)]

    def test_zero_size_layer_rejected(self):
        with pytest.raises(ValueError):
            init_xavier([3, 0, 1], RngStream(seed=1))
        with pytest.raises(ValueError):
            init_xavier([3], RngStream(seed=1))


class TestForward:
    def test_zero_network_outputs_zero(self):
        net = zero_net([3, 4, 2])
        x = np.random.default_rng(0).normal(size=(7, 3))
        assert (forward_batch(net, x) == 0.0).all()

    def test_identity_affine_layer(self):
        net = zero_net([3, 3])
        net.weights[0][:] = np.eye(3)
        x = np.random.default_rng(1).normal(size=(5, 3))
        assert forward_batch(net, x) == pytest.approx(x)

    def test_single_tanh_unit(self):
        net = zero_net([1, 1, 1])
        net.weights[0][:] = 1.0
        net.weights[1][:] = 1.0
        out = forward_batch(net, np.array([[10.0]]))
        assert out[0, 0] == pytest.approx(np.tanh(10.0), abs=1e-12)

    def test_shape_mismatch_rejected(self):
        net = zero_net([3, 2])
        with pytest.raises(ValueError):
            forward_batch(net, np.zeros((4, 2)))

    def test_determinism(self):
        net = init_xavier([4, 6, 2], RngStream(seed=3))
        x = np.random.default_rng(2).normal(size=(11, 4))
        assert (forward_batch(net, x) == forward_batch(net, x)).all()

    def test_lipschitz_upper_bound(self):
        net = init_xavier([3, 8, 8, 1], RngStream(seed=4))
        bound = np.prod([np.linalg.norm(w, 2) for w in net.weights])
        rng = np.random.default_rng(5)
        for _ in range(50):
            x, y = rng.normal(size=(2, 1, 3))
            lhs = np.abs(forward_batch(net, x) - forward_batch(net, y)).max()
            assert lhs <= bound * np.linalg.norm(x - y) + 1e-12


class TestBackward:
    def test_zero_out_grads(self):
        net = init_xavier([3, 5, 2], RngStream(seed=6))
        x = np.random.default_rng(3).normal(size=(4, 3))
        g = backward_batch(net, x, np.zeros((4, 2)))
        assert all((w == 0).all() for w in g.weights)
        assert all((b == 0).all() for b in g.biases)

    def test_affine_closed_form(self):
        net = zero_net([3, 2])
        net.weights[0][:] = np.random.default_rng(4).normal(size=(2, 3))
        x = np.array([[1.0, -2.0, 0.5]])
        og = np.array([[2.0, -1.0]])
        g = backward_batch(net, x, og)
        assert g.weights[0] == pytest.approx(og.T @ x)
        assert g.biases[0] == pytest.approx(og[0])

    def test_matches_finite_differences(self):
        net = init_xavier([4, 10, 10, 3], RngStream(seed=7))
        x = RngStream(seed=8).generator().standard_normal((6, 4))
        dev = grad_check(net, x, n_samples=100, stream=RngStream(seed=9))
        assert dev <= 1e-6


class TestGradCheck:
    def test_zero_network_zero_out_grads(self):
        net = zero_net([2, 3, 1])
        x = np.zeros((2, 2))
        dev = grad_check(net, x, out_grads=np.zeros((2, 1)), n_samples=20)
        assert dev == 0.0

    def test_random_net_within_tolerance(self):
        net = init_xavier([5, 12, 12, 2], RngStream(seed=10))
        x = RngStream(seed=11).generator().standard_normal((8, 5))
        assert grad_check(net, x, n_samples=100, stream=RngStream(seed=12)) <= 1e-6

    def test_corrupted_gradient_detected(self):
        net = init_xavier([3, 6, 1], RngStream(seed=13))
        x = RngStream(seed=14).generator().standard_normal((5, 3))
        og = np.ones((5, 1))
        bundle = backward_batch(net, x, og)
        bundle.weights[0][0, 0] *= 2.0  # deliberate corruption
        dev = grad_check(net, x, out_grads=og, grads=bundle, n_samples=10**9)
        assert dev > 1e-6


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        net = init_xavier([2, 4, 1], RngStream(seed=15))
        before = [w.copy() for w in net.weights]
        grads = GradBundle(
            weights=[np.zeros_like(w) for w in net.weights],
            biases=[np.zeros_like(b) for b in net.biases],
        )
        adam_update(AdamState.for_network(net), net, grads, lr=0.1)
        for w, old in zip(net.weights, before):
            assert (w == old).all()

    def test_first_step_is_signed_learning_rate(self):
        net = zero_net([1, 1])
        grads = GradBundle(weights=[np.array([[3.0]])], biases=[np.array([0.0])])
        adam_update(AdamState.for_network(net), net, grads, lr=0.05)
        # first Adam step moves by -lr * g / (|g| + eps) ~ -lr * sign(g)
        assert net.weights[0][0, 0] == pytest.approx(-0.05, rel=1e-6)

    def test_scalar_convergence(self):
        # minimize |theta - 3|^2 from theta = 0
        theta = np.array([[0.0]])
        net = MlpNetwork(layer_sizes=(1, 1), weights=[theta], biases=[np.array([0.0])])
        state = AdamState.for_network(net)
        for _ in range(500):
            g = 2.0 * (net.weights[0][0, 0] - 3.0)
            grads = GradBundle(weights=[np.array([[g]])], biases=[np.array([0.0])])
            adam_update(state, net, grads, lr=0.05)
        assert abs(net.weights[0][0, 0] - 3.0) <= 0.05

    def test_rejects_nonfinite_gradient(self):
        net = zero_net([1, 1])
        grads = GradBundle(weights=[np.array([[np.nan]])], biases=[np.array([0.0])])
        with pytest.raises(FloatingPointError):
            adam_update(AdamState.for_network(net), net, grads, lr=0.1)

    def test_rejects_nonpositive_lr(self):
        net = zero_net([1, 1])
        grads = GradBundle(weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
        with pytest.raises(ValueError):
            adam_update(AdamState.for_network(net), net, grads, lr=0.0)

    def test_step_counter_increments(self):
        net = zero_net([2, 2])
        state = AdamState.for_network(net)
        grads = GradBundle(weights=[np.ones((2, 2))], biases=[np.ones(2)])
        for expected in (1, 2, 3):
            adam_update(state, net, grads, lr=0.01)
            assert state.step == expected


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = init_xavier([4, 9, 3], RngStream(seed=16))
        path = tmp_path / "net.ckpt"
        save_network(net, path)
        back = load_network(path)
        assert back.layer_sizes == net.layer_sizes
        for a, b in zip(net.weights, back.weights):
            assert (a == b).all()
        for a, b in zip(net.biases, back.biases):
            assert (a == b).all()
        x = np.random.default_rng(6).normal(size=(5, 4))
        assert (forward_batch(net, x) == forward_batch(back, x)).all()

    def test_round_trip_with_input_scaling(self, tmp_path):
        net = init_xavier([3, 5, 1], RngStream(seed=17))
        net.set_input_scaling([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
        path = tmp_path / "net.ckpt"
        save_network(net, path)
        back = load_network(path)
        assert (back.input_shift == net.input_shift).all()
        assert (back.input_scale == net.input_scale).all()
        x = np.random.default_rng(7).normal(size=(4, 3))
        assert (forward_batch(net, x) == forward_batch(back, x)).all()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_network(path)
