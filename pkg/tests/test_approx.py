import numpy as np
import pytest

from reachsafe.approx import (
    BackwardBeforeForward,
    Mlp,
    Trainer,
    init_optimizer,
    load_mlp,
    optimizer_step,
    save_mlp,
    soft_update,
)
from reachsafe.seeding import substream


def finite_difference_grads(net, x, upstream, step=1e-5):
    """Central-difference oracle for d(sum(upstream*out))/d(params)."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat = p.ravel()
        gflat = g.ravel()
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            hi = float(np.sum(upstream * net.forward(x)))
            flat[k] = old - step
            lo = float(np.sum(upstream * net.forward(x)))
            flat[k] = old
            gflat[k] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_error(a, b):
    num = np.abs(a - b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((num / den).max())


def test_zero_weight_net_outputs_bias():
    net = Mlp([3, 4, 2], seed=0)
    net.set_parameters([np.zeros_like(p) for p in net.parameters()])
    net.biases[-1] = np.array([0.5, -1.5])
    out = net.forward(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(out, [0.5, -1.5])


def test_identity_linear_layer_passes_input_through():
    net = Mlp([3, 3], seed=0)
    net.set_parameters([np.eye(3), np.zeros(3)])
    x = np.array([0.3, -0.7, 2.0])
    assert np.allclose(net.forward(x), x)


def test_forward_is_deterministic_per_seed():
    a = Mlp([4, 8, 8, 2], seed=42)
    b = Mlp([4, 8, 8, 2], seed=42)
    x = substream(1, "x").normal(size=(5, 4))
    assert np.array_equal(a.forward(x), b.forward(x))
    c = Mlp([4, 8, 8, 2], seed=43)
    assert not np.array_equal(a.forward(x), c.forward(x))


def test_linear_case_gradient_is_input():
    net = Mlp([3, 1], seed=1)
    x = np.array([1.0, -2.0, 0.5])
    net.forward(x)
    grads, _ = net.backward(np.array([1.0]))
    assert np.allclose(grads[0].ravel(), x)
    assert np.allclose(grads[1], [1.0])


def test_zero_upstream_gives_zero_gradients():
    net = Mlp([3, 5, 2], seed=2)
    net.forward(np.ones(3))
    grads, gx = net.backward(np.zeros(2))
    assert all(np.allclose(g, 0) for g in grads)
    assert np.allclose(gx, 0)


def test_backward_without_forward_raises():
    net = Mlp([2, 2], seed=0)
    with pytest.raises(BackwardBeforeForward):
        net.backward(np.ones(2))


def test_dimension_mismatch_raises():
    net = Mlp([3, 2], seed=0)
    with pytest.raises(ValueError):
        net.forward(np.ones(4))


def test_gradients_match_finite_differences():
    # 100 random (net, input, upstream) cases on 2-hidden-layer nets.
    worst = 0.0
    for case in range(100):
        rng = substream(7, "gradcheck", case)
        net = Mlp([3, 6, 5, 2], seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=(2, 3))
        upstream = rng.normal(size=(2, 2))
        net.forward(x)
        grads, _ = net.backward(upstream)
        numeric = finite_difference_grads(net, x, upstream)
        for g, n in zip(grads, numeric):
            worst = max(worst, relative_error(g, n))
    assert worst < 1e-3, worst


def test_input_gradient_matches_finite_differences():
    rng = substream(8, "input-grad")
    net = Mlp([4, 8, 3], seed=5)
    x = rng.normal(size=4)
    upstream = rng.normal(size=3)
    net.forward(x)
    _, gx = net.backward(upstream)
    numeric = np.zeros_like(x)
    for k in range(x.size):
        dx = np.zeros_like(x)
        dx[k] = 1e-5
        hi = float(np.sum(upstream * net.forward(x + dx)))
        lo = float(np.sum(upstream * net.forward(x - dx)))
        numeric[k] = (hi - lo) / 2e-5
    assert relative_error(gx, numeric) < 1e-3


def test_zero_gradient_leaves_parameters_unchanged():
    net = Mlp([2, 3, 1], seed=3)
    state = init_optimizer(net.parameters(), lr=1e-2)
    before = [p.copy() for p in net.parameters()]
    after = optimizer_step(state, net.parameters(), [np.zeros_like(p) for p in before])
    assert all(np.allclose(a, b) for a, b in zip(after, before))
    assert state.step == 1


def test_constant_gradient_moves_against_it():
    params = [np.zeros((2, 2))]
    state = init_optimizer(params, lr=1e-2)
    g = np.full((2, 2), 0.7)
    for _ in range(50):
        params = optimizer_step(state, params, [g])
    assert np.all(params[0] < 0)


def test_optimizer_shape_mismatch_raises():
    params = [np.zeros((2, 2))]
    state = init_optimizer(params, lr=1e-2)
    with pytest.raises(ValueError):
        optimizer_step(state, params, [np.zeros(3)])


def test_training_runs_are_reproducible():
    def run():
        rng = substream(9, "train")
        net = Mlp([1, 16, 1], seed=4)
        trainer = Trainer(net, lr=1e-2)
        for _ in range(200):
            x = rng.uniform(-1, 1, size=(16, 1))
            y = x * x
            pred = net.forward(x)
            grads, _ = net.backward(2 * (pred - y) / len(x))
            trainer.apply(grads)
        return net.parameters()

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_quadratic_regression_converges():
    # Convex toy problem: fit y = 0.5 x with a single linear layer.
    rng = substream(10, "quad")
    net = Mlp([1, 1], seed=6)
    trainer = Trainer(net, lr=5e-2)
    x = rng.uniform(-1, 1, size=(64, 1))
    y = 0.5 * x
    loss = None
    for _ in range(1000):
        pred = net.forward(x)
        loss = float(np.mean((pred - y) ** 2))
        grads, _ = net.backward(2 * (pred - y) / len(x))
        trainer.apply(grads)
    assert loss < 1e-6


def test_soft_update_mixes_parameters():
    a = Mlp([2, 2], seed=1)
    b = Mlp([2, 2], seed=2)
    ref = [0.9 * t + 0.1 * s for t, s in zip(a.parameters(), b.parameters())]
    soft_update(a, b, 0.1)
    assert all(np.allclose(p, q) for p, q in zip(a.parameters(), ref))


def test_checkpoint_roundtrip(tmp_path):
    net = Mlp([3, 8, 2], seed=11)
    path = tmp_path / "net.mlp"
    save_mlp(net, path)
    back = load_mlp(path)
    assert back.sizes == net.sizes
    x = substream(12, "ckpt").normal(size=(4, 3))
    # Payload is float32, so agreement is to single precision.
    assert np.allclose(back.forward(x), net.forward(x), atol=1e-5)
