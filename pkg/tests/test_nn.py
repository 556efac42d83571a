import numpy as np
import pytest

from mdmm_lab.errors import BackwardBeforeForward, DimensionMismatch, NonFiniteValue
from mdmm_lab.nn import (
    Activation,
    AdamWState,
    Net,
    NetSpec,
    adamw_step,
    load_snapshot,
    net_from_snapshot,
    save_snapshot,
    snapshot_bytes,
)


def fd_grad(fn, x, h=1e-5):
    """Central finite differences of scalar fn() w.r.t. array x (mutated then restored)."""
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        up = fn()
        x.flat[i] = orig - h
        down = fn()
        x.flat[i] = orig
        g.flat[i] = (up - down) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-8):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= floor) | (err <= rel * scale)
    assert ok.all(), f"worst relative error {np.max(err / np.maximum(scale, 1e-300)):.3g}"


def dense_oracle(net, x):
    """Independent forward pass built from the NetSpec weights, not from the Net's cache."""
    d = net.spec.layer_dims
    p = net.params
    off = 0
    a = x
    for i in range(len(d) - 1):
        W = p[off:off + d[i] * d[i + 1]].reshape(d[i], d[i + 1])
        off += d[i] * d[i + 1]
        b = p[off:off + d[i + 1]]
        off += d[i + 1]
        z = np.einsum("ni,io->no", a, W) + b
        if i < len(d) - 2:
            z = np.tanh(z) if net.spec.activation is Activation.TANH else np.where(z > 0, z, 0.0)
        a = z
    return a


def test_param_count():
    spec = NetSpec((8, 64, 64, 64))
    assert spec.n_params == 9 * 64 + 65 * 64 + 65 * 64
    assert Net(spec).params.size == spec.n_params


def test_init_bounds_and_determinism():
    spec = NetSpec((10, 5, 3), init_seed=42)
    a, b = Net(spec), Net(spec)
    assert np.array_equal(a.params, b.params)
    assert np.all(np.abs(a.weights[0]) <= 1 / np.sqrt(10))
    assert np.all(np.abs(a.weights[1]) <= 1 / np.sqrt(5))
    assert not np.array_equal(a.params, Net(NetSpec((10, 5, 3), init_seed=43)).params)


def test_forward_zero_and_identity():
    net = Net(NetSpec((3, 4, 2)))
    net.params[...] = 0.0
    assert np.array_equal(net.forward(np.ones((5, 3))), np.zeros((5, 2)))
    ident = Net(NetSpec((4, 4)))
    ident.params[...] = 0.0
    ident.weights[0][...] = np.eye(4)
    x = np.random.default_rng(0).normal(size=(6, 4))
    assert np.array_equal(ident.forward(x), x)


@pytest.mark.parametrize("act", list(Activation))
def test_forward_matches_dense_oracle(act):
    net = Net(NetSpec((4, 8, 4), act, init_seed=7))
    x = np.random.default_rng(1).normal(size=(9, 4))
    np.testing.assert_allclose(net.forward(x), dense_oracle(net, x), rtol=1e-13, atol=1e-14)


def test_forward_dimension_check():
    with pytest.raises(DimensionMismatch):
        Net(NetSpec((4, 2))).forward(np.ones((3, 5)))


def test_backward_before_forward():
    with pytest.raises(BackwardBeforeForward):
        Net(NetSpec((2, 2))).backward(np.ones((1, 2)))


def test_backward_trivial_cases():
    net = Net(NetSpec((3, 5, 2)))
    net.forward(np.ones((4, 3)))
    net.backward(np.zeros((4, 2)))
    assert np.all(net.grads == 0.0)

    lin = Net(NetSpec((1, 1)))
    lin.forward(np.array([[2.5]]))
    lin.backward(np.array([[1.0]]))
    assert lin.weight_grads[0][0, 0] == 2.5
    assert lin.bias_grads[0][0] == 1.0


def test_backward_leaves_params_untouched():
    net = Net(NetSpec((3, 4, 2), init_seed=3))
    before = net.params.copy()
    net.forward(np.ones((2, 3)))
    net.backward(np.ones((2, 2)))
    assert np.array_equal(before, net.params)


@pytest.mark.parametrize("trial", range(20))
def test_backward_matches_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    depth = rng.integers(1, 4)
    dims = tuple(int(v) for v in rng.integers(1, 7, size=depth + 1))
    act = Activation.TANH if trial % 2 == 0 else Activation.RELU
    net = Net(NetSpec(dims, act, init_seed=trial))
    x = rng.normal(size=(int(rng.integers(1, 5)), dims[0]))
    w = rng.normal(size=(x.shape[0], dims[-1]))

    def loss():
        return float(np.sum(w * net.forward(x)) + 0.5 * np.sum(net.forward(x) ** 2))

    out = net.forward(x)
    net.zero_grad()
    net.backward(w + out)
    numeric = fd_grad(loss, net.params)
    if act is Activation.RELU:
        # skip coordinates whose perturbation crosses a kink
        pre = [h for (_, h, _) in net._cache[:-1]]
        if any(np.any(np.abs(h) < 1e-4) for h in pre):
            pytest.skip("relu kink within finite-difference step")
    assert_grad_close(net.grads, numeric)


def test_backward_input_gradient():
    net = Net(NetSpec((3, 6, 2), init_seed=5))
    x = np.random.default_rng(2).normal(size=(4, 3))
    net.forward(x)
    gx = net.backward(np.ones((4, 2)))
    numeric = fd_grad(lambda: float(net.forward(x).sum()), x)
    assert_grad_close(gx, numeric)


def test_backward_is_linear_and_accumulates():
    rng = np.random.default_rng(9)
    net = Net(NetSpec((5, 7, 3), init_seed=11))
    x = rng.normal(size=(6, 5))
    g1, g2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    net.forward(x)
    net.zero_grad()
    net.backward(g1 + g2)
    together = net.grads.copy()
    net.zero_grad()
    net.backward(g1)
    a = net.grads.copy()
    net.zero_grad()
    net.backward(g2)
    b = net.grads.copy()
    np.testing.assert_allclose(together, a + b, rtol=0, atol=1e-12)
    net.zero_grad()
    net.backward(g1)
    net.backward(g2)
    np.testing.assert_allclose(net.grads, a + b, rtol=0, atol=1e-12)


def test_adamw_zero_gradient_no_decay_is_noop():
    p = np.array([1.0, -2.0, 3.0])
    before = p.copy()
    st = AdamWState(3, weight_decay=0.0)
    adamw_step(st, p, np.zeros(3))
    assert np.array_equal(p, before)
    assert st.step == 1


def test_adamw_first_step_is_signed_step():
    p = np.zeros(4)
    g = np.array([3.0, -0.5, 1e-2, -20.0])
    st = AdamWState(4, step_size=1e-3, weight_decay=0.0)
    adamw_step(st, p, g)
    np.testing.assert_allclose(p, -1e-3 * np.sign(g), rtol=1e-5)


def test_adamw_decoupled_decay_applied_before_moment_step():
    p = np.array([2.0])
    st = AdamWState(1, step_size=0.1, weight_decay=0.5)
    adamw_step(st, p, np.array([1.0]))
    expected = 2.0 * (1 - 0.1 * 0.5) - 0.1 * 1.0 / (1.0 + 1e-8)
    assert p[0] == pytest.approx(expected, rel=1e-12)


def test_adamw_descends_quadratic():
    p = np.array([1.0])
    st = AdamWState(1, step_size=0.05)
    values = [p[0] ** 2]
    for _ in range(10):
        adamw_step(st, p, 2 * p)
        values.append(p[0] ** 2)
    assert all(b < a for a, b in zip(values, values[1:]))
    assert st.step == 10


def test_adamw_errors():
    st = AdamWState(2)
    with pytest.raises(DimensionMismatch):
        adamw_step(st, np.zeros(2), np.zeros(3))
    with pytest.raises(NonFiniteValue):
        adamw_step(st, np.zeros(2), np.array([np.nan, 0.0]))


def test_training_is_bitwise_deterministic():
    def run():
        net = Net(NetSpec((3, 8, 2), init_seed=4))
        st = AdamWState(net.params.size, step_size=1e-2)
        x = np.random.default_rng(0).normal(size=(16, 3))
        for _ in range(25):
            out = net.forward(x)
            net.zero_grad()
            net.backward(out - 1.0)
            adamw_step(st, net.params, net.grads)
        return net.params.copy()

    assert np.array_equal(run(), run())


def test_snapshot_roundtrip(tmp_path):
    net = Net(NetSpec((4, 3, 2), Activation.RELU, init_seed=2**40 + 5))
    blob = snapshot_bytes(net, step=17)
    copy, step = net_from_snapshot(blob)
    assert step == 17
    assert copy.spec == net.spec
    assert np.array_equal(copy.params, net.params)
    # payload is raw little-endian float64 at the tail
    tail = np.frombuffer(blob[-8 * net.spec.n_params:], dtype="<f8")
    assert np.array_equal(tail, net.params)

    path = tmp_path / "net.bin"
    save_snapshot(path, net, 3)
    again, step = load_snapshot(path)
    assert step == 3 and np.array_equal(again.params, net.params)
    with pytest.raises(ValueError):
        net_from_snapshot(b"garbage" + blob)
    with pytest.raises(ValueError):
        net_from_snapshot(blob[:-8])
