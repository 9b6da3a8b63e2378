"""Network, gradient and optimizer checks against independent oracles."""

import numpy as np
import pytest

from skirmish import nn


def test_init_deterministic_and_shaped():
    a = nn.init_params((4, 8, 3), seed=0)
    b = nn.init_params((4, 8, 3), seed=0)
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa, pb)
    assert [w.shape for w in a.weights] == [(8, 4), (3, 8)]
    assert [bb.shape for bb in a.biases] == [(8,), (3,)]
    assert all((bias == 0).all() for bias in a.biases)
    c = nn.init_params((4, 8, 3), seed=1)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_he_scale():
    net = nn.init_params((256, 256), seed=7)
    observed = net.weights[0].std()
    expected = np.sqrt(2.0 / 256.0)
    assert abs(observed - expected) / expected < 0.10


def test_forward_identity_configuration():
    net = nn.init_params((3, 3), seed=0)
    net.weights[0][:] = np.eye(3)
    net.biases[0][:] = 0.0
    x = np.array([0.5, -2.0, 3.0])
    assert np.array_equal(nn.forward(net, x), x)  # single affine layer, no relu


def test_forward_zero_weights_gives_bias():
    net = nn.init_params((4, 2), seed=0)
    net.weights[0][:] = 0.0
    net.biases[0][:] = [1.5, -0.5]
    assert np.array_equal(nn.forward(net, np.ones(4)), [1.5, -0.5])


def _fixed_221():
    net = nn.init_params((2, 2, 1), seed=0)
    net.weights[0][:] = [[1.0, 2.0], [3.0, 4.0]]
    net.biases[0][:] = [1.0, -1.0]
    net.weights[1][:] = [[1.0, -1.0]]
    net.biases[1][:] = [0.5]
    return net


@pytest.mark.parametrize(
    "x,expected",
    [
        ([1.0, -1.0], 0.5),    # both hidden units clipped at zero
        ([2.0, 1.0], -3.5),    # 5 - 9 + 0.5
        ([0.0, 0.0], 1.5),     # relu([1, -1]) -> [1, 0]
    ],
)
def test_forward_hand_computed_table(x, expected):
    net = _fixed_221()
    assert nn.forward(net, np.array(x))[0] == expected


def test_forward_batched_matches_rows():
    # BLAS may reassociate across batch shapes, so equality is near-exact only
    net = nn.init_params((4, 8, 3), seed=2)
    xs = np.random.default_rng(0).normal(size=(5, 4))
    batched = nn.forward(net, xs)
    for i in range(5):
        assert np.allclose(batched[i], nn.forward(net, xs[i]), rtol=1e-12, atol=1e-12)


def test_forward_shape_mismatch():
    net = nn.init_params((4, 3), seed=0)
    with pytest.raises(nn.ShapeMismatch):
        nn.forward(net, np.ones(5))


def test_backward_zero_output_gradient():
    net = nn.init_params((4, 8, 3), seed=3)
    g = nn.backward(net, np.ones(4), np.zeros(3))
    assert all((p == 0).all() for p in g.params())
    assert (g.wrt_input == 0).all()


def test_backward_single_linear_layer_outer_product():
    net = nn.init_params((3, 2), seed=0)
    x = np.array([1.0, -2.0, 0.5])
    gy = np.array([2.0, -1.0])
    g = nn.backward(net, x, gy)
    assert np.array_equal(g.weights[0], np.outer(gy, x))
    assert np.array_equal(g.biases[0], gy)
    assert np.array_equal(g.wrt_input, gy @ net.weights[0])


def test_backward_purity():
    net = nn.init_params((4, 8, 3), seed=4)
    snapshot = [p.copy() for p in net.params()]
    nn.forward(net, np.ones(4))
    nn.backward(net, np.ones(4), np.ones(3))
    for before, after in zip(snapshot, net.params()):
        assert np.array_equal(before, after)


def test_gradcheck_random_nets():
    rng = np.random.default_rng(12)
    for k in range(10):
        net = nn.init_params((4, 8, 3), seed=100 + k)
        x = rng.normal(size=4)
        report = nn.finite_diff_check(net, x, tolerance=1e-3)
        assert report.passed, report.max_rel_error


def test_gradcheck_detects_corruption():
    net = nn.init_params((4, 8, 3), seed=9)
    x = np.random.default_rng(1).normal(size=4)
    assert nn.finite_diff_check(net, x, tolerance=1e-3).passed

    original = nn.backward

    def corrupted(n, xx, gy):
        g = original(n, xx, gy)
        g.biases[-1][0] += 0.5
        return g

    nn.backward = corrupted
    try:
        assert not nn.finite_diff_check(net, x, tolerance=1e-3).passed
    finally:
        nn.backward = original


def test_gradcheck_zero_input_zero_bias():
    net = nn.init_params((4, 8, 3), seed=5)
    report = nn.finite_diff_check(net, np.zeros(4), tolerance=1e-3)
    assert report.passed


def test_adam_zero_gradient_is_identity():
    net = nn.init_params((3, 3), seed=0)
    before = [p.copy() for p in net.params()]
    state = nn.OptimState.for_params(net.params(), lr=0.01)
    nn.adam_step(net.params(), [np.zeros_like(p) for p in net.params()], state)
    for b, a in zip(before, net.params()):
        assert np.array_equal(b, a)


def test_adam_first_step_magnitude():
    p = np.array([1.0, -2.0])
    state = nn.OptimState.for_params([p], lr=0.01)
    nn.adam_step([p], [np.array([0.5, -3.0])], state)
    delta = p - np.array([1.0, -2.0])
    # bias-corrected first step is -lr * sign(g) up to the epsilon fuzz
    assert np.allclose(np.abs(delta), 0.01, rtol=1e-6)
    assert delta[0] < 0 < delta[1]


def test_adam_converges_on_quadratic():
    x = np.array([0.0])
    state = nn.OptimState.for_params([x], lr=0.1)
    for _ in range(200):
        grad = 2.0 * (x - 3.0)
        nn.adam_step([x], [grad.copy()], state)
    assert abs(x[0] - 3.0) < 1e-3


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = nn.init_params((5, 16, 4), seed=21)
    state = nn.OptimState.for_params(net.params(), lr=3e-4)
    grads = [np.full_like(p, 0.25) for p in net.params()]
    nn.adam_step(net.params(), grads, state)
    path = tmp_path / "net.npz"
    nn.save_checkpoint(path, net, state, {"note": "test"})
    loaded, opt, meta = nn.load_checkpoint(path)
    assert loaded.widths == net.widths
    for a, b in zip(net.params(), loaded.params()):
        assert np.array_equal(a, b)
    assert opt.step == 1 and opt.lr == 3e-4
    for a, b in zip(state.m + state.v, opt.m + opt.v):
        assert np.array_equal(a, b)
    assert meta == {"note": "test"}


def test_params_hash_tracks_content():
    net = nn.init_params((4, 4), seed=0)
    h0 = nn.params_hash(net.params())
    assert h0 == nn.params_hash(net.params())
    net.weights[0][0, 0] += 1e-12
    assert nn.params_hash(net.params()) != h0
