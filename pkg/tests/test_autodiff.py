import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmrkit.autodiff import (Adam, AdamState, BatchNormState, Tensor, adam_step, batchnorm1d,
                              binary_cross_entropy_with_logits, conv1d, global_avg_pool,
                              gradcheck, kaiming_init, l2_normalize, linear, load_tensors,
                              logsumexp, maxpool1d, relu, save_tensors, sigmoid)
from clmrkit.errors import CheckpointError, DegenerateBatch, NonScalarLoss, ShapeMismatch


def conv_reference(x, w, b, stride, padding):
    """Direct-loop cross-correlation."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    bsz, _, n = x.shape
    c_out, _, k = w.shape
    l_out = (n - k) // stride + 1
    out = np.zeros((bsz, c_out, l_out))
    for bi in range(bsz):
        for o in range(c_out):
            for t in range(l_out):
                out[bi, o, t] = np.sum(x[bi, :, t * stride:t * stride + k] * w[o]) + b[o]
    return out


# -- tensor core -----------------------------------------------------------

def test_broadcast_gradients():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ((x * y) + y).sum().backward()
    np.testing.assert_array_equal(x.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    np.testing.assert_array_equal(y.grad, [1 + 0 + 3 + 1, 1 + 1 + 4 + 1, 1 + 2 + 5 + 1])


def test_shared_node_accumulates():
    # y = x*x + x  ->  dy/dx = 2x + 1
    x = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [7.0, -1.0])


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


def test_non_scalar_backward_raises():
    with pytest.raises(NonScalarLoss):
        (Tensor(np.ones(3), requires_grad=True) * 2).backward()
    with pytest.raises(ValueError):
        Tensor(np.ones(3)).item()


def test_getitem_gradient_scatters():
    x = Tensor(np.arange(5.0), requires_grad=True)
    x[np.array([0, 0, 3])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 0, 0, 1, 0])


# -- forward oracles -------------------------------------------------------

@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (3, 0), (2, 1)])
def test_conv1d_matches_loops(rng, stride, padding):
    x = rng.standard_normal((2, 3, 17))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    got = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv_reference(x, w, b, stride, padding), atol=1e-12)


def test_conv1d_shape_errors(rng):
    with pytest.raises(ShapeMismatch):
        conv1d(Tensor(np.ones((1, 2, 9))), Tensor(np.ones((4, 3, 3))))
    with pytest.raises(ShapeMismatch):
        conv1d(Tensor(np.ones((1, 3, 2))), Tensor(np.ones((4, 3, 3))))


def test_batchnorm_forward_and_running_stats(rng):
    x = rng.standard_normal((4, 3, 10)) * 2 + 1
    state = BatchNormState.fresh(3)
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    out = batchnorm1d(Tensor(x), Tensor(gamma), Tensor(beta), state).data
    mu = x.mean(axis=(0, 2), keepdims=True)
    var = x.var(axis=(0, 2), keepdims=True)
    want = (x - mu) / np.sqrt(var + 1e-5) * gamma[:, None] + beta[:, None]
    np.testing.assert_allclose(out, want, atol=1e-10)
    np.testing.assert_allclose(state.running_mean, 0.1 * mu.ravel(), rtol=1e-5)
    unbiased = x.var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * unbiased, rtol=1e-5)
    # eval mode uses the running statistics
    ev = batchnorm1d(Tensor(x), Tensor(gamma), Tensor(beta), state, training=False).data
    want = ((x - state.running_mean[:, None]) / np.sqrt(state.running_var[:, None] + 1e-5)
            * gamma[:, None] + beta[:, None])
    np.testing.assert_allclose(ev, want, rtol=1e-5, atol=1e-6)


def test_batchnorm_degenerate():
    with pytest.raises(DegenerateBatch):
        batchnorm1d(Tensor(np.ones((1, 2, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    BatchNormState.fresh(2))


def test_maxpool_forward_and_ties():
    x = np.array([[[1.0, 5.0, 2.0, 7.0, 7.0, 0.0, 9.0]]])
    t = Tensor(x, requires_grad=True)
    out = maxpool1d(t, 3)
    np.testing.assert_array_equal(out.data, [[[5.0, 7.0]]])
    out.sum().backward()
    np.testing.assert_array_equal(t.grad, [[[0, 1, 0, 1, 0, 0, 0]]])   # first of the tie


def test_logsumexp_stable():
    x = Tensor(np.array([[1000.0, 1000.0], [-1000.0, 0.0]]))
    np.testing.assert_allclose(logsumexp(x, axis=1).data, [1000 + np.log(2), np.log1p(np.exp(-1000.0))])


def test_bce_matches_formula(rng):
    z = rng.standard_normal((5, 3)) * 4
    t = (rng.random((5, 3)) < 0.5).astype(float)
    p = 1 / (1 + np.exp(-z))
    want = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    got = binary_cross_entropy_with_logits(Tensor(z), t).item()
    assert got == pytest.approx(want, rel=1e-12)


# -- gradient checks --------------------------------------------------------

GRAD_CASES = {
    "conv1d": (lambda x, w, b: conv1d(x, w, b, stride=1, padding=1),
               lambda r: [r.standard_normal((2, 2, 8)), r.standard_normal((3, 2, 3)),
                          r.standard_normal(3)]),
    "conv1d_strided": (lambda x, w: conv1d(x, w, stride=3),
                       lambda r: [r.standard_normal((2, 1, 12)), r.standard_normal((2, 1, 3))]),
    "linear": (lambda x, w, b: linear(x, w, b),
               lambda r: [r.standard_normal((3, 4)), r.standard_normal((2, 4)), r.standard_normal(2)]),
    "sigmoid": (sigmoid, lambda r: [r.standard_normal((3, 4)) * 3]),
    "relu": (relu, lambda r: [r.standard_normal((3, 4)) + 0.05]),
    "logsumexp": (lambda x: logsumexp(x, axis=1), lambda r: [r.standard_normal((3, 5))]),
    "l2_normalize": (lambda x: l2_normalize(x, axis=1) * Tensor(np.arange(12.0).reshape(3, 4)),
                     lambda r: [r.standard_normal((3, 4))]),
    "global_avg_pool": (lambda x: global_avg_pool(x) * Tensor(np.arange(2.0)),
                        lambda r: [r.standard_normal((2, 2, 5))]),
    "bce": (lambda z: binary_cross_entropy_with_logits(z, np.eye(3)[:, :2]),
            lambda r: [r.standard_normal((3, 2))]),
    "matmul_div_pow": (lambda a, b: ((a @ b) / (b.sum() + 10.0)) ** 2,
                       lambda r: [r.standard_normal((2, 3)), r.standard_normal((3, 2))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck(name):
    fn, make = GRAD_CASES[name]
    r = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(3):
        assert gradcheck(fn, make(r)) < 1e-5


def test_gradcheck_batchnorm_train():
    r = np.random.default_rng(0)
    weights = r.standard_normal((3, 2, 5))   # non-trivial downstream loss

    def fn(x, g, b):
        out = batchnorm1d(x, g, b, BatchNormState.fresh(2))
        return out * out * Tensor(weights)

    for _ in range(3):
        arrays = [r.standard_normal((3, 2, 5)), r.standard_normal(2), r.standard_normal(2)]
        assert gradcheck(fn, arrays) < 1e-5


def test_gradcheck_maxpool_off_ties():
    r = np.random.default_rng(1)
    for _ in range(3):
        x = r.permutation(24).reshape(2, 2, 6).astype(float)   # distinct values
        assert gradcheck(lambda t: maxpool1d(t, 3) * maxpool1d(t, 3), [x], h=1e-4) < 1e-6


# -- optimiser ---------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    g = np.array([0.3, -4.0, 1e-3])
    adam_step([p], [g], AdamState(lr=0.01))
    np.testing.assert_allclose(p.data, [1.0, -2.0, 0.5] - 0.01 * g / (np.abs(g) + 1e-8))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(0, 0.1), st.integers(0, 2 ** 31))
def test_adam_matches_reference(steps, wd, seed):
    r = np.random.default_rng(seed)
    p0 = r.standard_normal(4)
    grads = [r.standard_normal(4) for _ in range(steps)]
    p = Tensor(p0.copy(), requires_grad=True)
    state = AdamState(lr=1e-2, weight_decay=wd)
    for g in grads:
        adam_step([p], [g], state)
    # reference recomputes decay against the evolving parameter
    m = v = np.zeros(4)
    q = p0.copy()
    for t, g in enumerate(grads, start=1):
        g = g + wd * q
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q = q - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, q, rtol=1e-12, atol=1e-12)


def test_adam_minimises_quadratic():
    target = np.array([1.0, -3.0, 2.0])
    p = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        ((p - Tensor(target)) ** 2).sum().backward()
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_kaiming_std():
    w = kaiming_init((256, 64, 3), 64 * 3, np.random.default_rng(0))
    assert w.data.dtype == np.float32
    assert np.std(w.data) == pytest.approx(np.sqrt(2 / 192), rel=0.02)


# -- container files ----------------------------------------------------------

def test_tensor_file_round_trip(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32),
               "b": np.arange(5, dtype=np.int64), "c": rng.standard_normal(2)}
    path = save_tensors(tmp_path / "t.bin", tensors, {"note": "x", "n": 3})
    back, meta = load_tensors(path)
    assert meta == {"note": "x", "n": 3}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_tensor_file_corruption(tmp_path):
    path = save_tensors(tmp_path / "t.bin", {"a": np.ones(100, dtype=np.float32)})
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "short.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "junk.bin")


# -- worked examples and properties ----------------------------------------

def test_hand_examples():
    x = Tensor(np.arange(1.0, 6.0).reshape(1, 1, 5))
    np.testing.assert_array_equal(conv1d(x, Tensor(np.ones((1, 1, 3)))).data, [[[6, 9, 12]]])
    np.testing.assert_array_equal(conv1d(x, Tensor(np.array([[[0.0, 1.0, 0.0]]]))).data,
                                  [[[2, 3, 4]]])
    long = Tensor(np.zeros((1, 1, 59049), dtype=np.float32))
    assert conv1d(long, Tensor(np.ones((1, 1, 3), dtype=np.float32)), stride=3).shape == (1, 1, 19683)
    np.testing.assert_array_equal(maxpool1d(Tensor(np.array([[[1.0, 3, 2, 5, 4, 6]]]))).data, [[[3, 6]]])
    np.testing.assert_array_equal(relu(Tensor(np.array([-2.0, 2.0]))).data, [0, 2])
    assert sigmoid(Tensor(np.array(0.0))).item() == 0.5


def test_gradient_examples():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (w * Tensor(np.array([3.0, 4.0]))).sum().backward()
    np.testing.assert_array_equal(w.grad, [3, 4])
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (w.sum() + w.sum()).backward()
    np.testing.assert_array_equal(w.grad, [2, 2])


def test_disjoint_graphs_do_not_leak():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0]), requires_grad=True)
    (a * a).sum().backward()
    assert b.grad is None
    (b * 5).sum().backward()
    np.testing.assert_array_equal(a.grad, [2, 4])
    np.testing.assert_array_equal(b.grad, [5])


@pytest.mark.parametrize("gamma,beta", [(1.0, 0.0), (2.0, 3.0)])
def test_batchnorm_affine_contract(rng, gamma, beta):
    x = rng.standard_normal((8, 2, 50)) * 5 - 2
    out = batchnorm1d(Tensor(x), Tensor(np.full(2, gamma)), Tensor(np.full(2, beta)),
                      BatchNormState.fresh(2)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2)), beta, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2)), gamma, rtol=1e-4)
    ev = batchnorm1d(Tensor(x), Tensor(np.full(2, gamma)), Tensor(np.full(2, beta)),
                     BatchNormState.fresh(2), training=False).data
    np.testing.assert_allclose(ev, gamma * x / np.sqrt(1 + 1e-5) + beta, rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_conv1d_is_linear_in_input(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, 2, 3, 11))
    w = Tensor(r.standard_normal((4, 3, 3)))
    lhs = conv1d(Tensor(a + b), w, stride=2).data
    rhs = conv1d(Tensor(a), w, stride=2).data + conv1d(Tensor(b), w, stride=2).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_adam_fixed_points():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -1.0])
    adam_step([p], [np.ones(2)], AdamState(lr=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -1.0])
    q = Tensor(np.array(1.0), requires_grad=True)
    adam_step([q], [np.array(1.0)], AdamState(lr=3e-4))
    assert q.item() == pytest.approx(1 - 3e-4, abs=1e-10)


def test_adam_two_steps_decrease_quadratic():
    p = Tensor(np.array([2.0, -1.5]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    losses = []
    for _ in range(3):
        opt.zero_grad()
        loss = (p * p).sum()
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert losses[0] > losses[1] > losses[2]


def test_kaiming_statistics():
    assert np.std(kaiming_init((200_000,), 2, np.random.default_rng(1)).data) == pytest.approx(1.0, rel=0.01)
    w = kaiming_init((100_000,), 200, np.random.default_rng(2)).data
    assert 0.095 <= np.std(w) <= 0.105
    assert -0.01 <= np.mean(w) <= 0.01
