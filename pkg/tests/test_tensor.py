import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyrpix import gradcheck as gc
from pyrpix import tensor as T
from pyrpix.tensor import Tensor


def fd(f, x, h=1e-5):
    return gc.numeric_grad(lambda: f(Tensor(x)).item(), x, h=h).reshape(x.shape)


# -- elementwise --------------------------------------------------------------

def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_add_vectors():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_sigmoid_derivative_at_zero():
    x = Tensor(np.array([0.0]), requires_grad=True)
    T.sigmoid(x).sum().backward()
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)
    num = fd(lambda t: T.sigmoid(t).sum(), np.array([0.0]))
    assert abs(num[0] - 0.25) < 1e-8


def test_sigmoid_extreme_inputs_finite():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_elementwise_dispatch_and_errors():
    a, b = Tensor([1.0, 4.0]), Tensor([2.0, 2.0])
    np.testing.assert_array_equal(T.elementwise("div", a, b).data, [0.5, 2.0])
    np.testing.assert_array_equal(T.elementwise("relu", Tensor([-1.0, 3.0])).data, [0.0, 3.0])
    with pytest.raises(T.ShapeError, match=r"\(2,\).*\(3,\)"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_div_has_no_guard():
    with np.errstate(divide="ignore"):
        out = T.div(Tensor([1.0]), Tensor([0.0])).data
    assert np.isinf(out[0])


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_broadcast_grads(kind):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))
    fa = lambda t: T.elementwise(kind, t, Tensor(b)).sum()
    fb = lambda t: T.elementwise(kind, Tensor(a), t).sum()
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    T.elementwise(kind, ta, tb).sum().backward()
    assert gc.rel_error(ta.grad, fd(fa, a.copy())) < 1e-7
    assert gc.rel_error(tb.grad, fd(fb, b.copy())) < 1e-7


@pytest.mark.parametrize("kind", ["sigmoid", "exp", "log", "sqrt", "relu"])
def test_unary_grads(kind):
    rng = np.random.default_rng(2)
    x = rng.uniform(0.3, 2.0, size=(5,)) * rng.choice([-1, 1], size=5)
    if kind in ("log", "sqrt"):
        x = np.abs(x)
    t = Tensor(x, requires_grad=True)
    (T.elementwise(kind, t) * Tensor(np.arange(1.0, 6.0))).sum().backward()
    num = fd(lambda u: (T.elementwise(kind, u) * Tensor(np.arange(1.0, 6.0))).sum(), x.copy())
    assert gc.rel_error(t.grad, num) < 1e-7


# -- reductions ---------------------------------------------------------------

def test_mean_example():
    assert T.reduce("mean", Tensor([1.0, 2.0, 3.0, 4.0]), axis=0).item() == 2.5


def test_population_variance_example():
    v = T.reduce("variance", Tensor([0, -1, 1, -1.5, -0.5, 0.5, 1.5]), axis=0).item()
    assert v == pytest.approx(1.0, abs=1e-15)


def test_sum_backward_all_ones():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_reduce_keepdims_and_empty_axis():
    x = Tensor(np.ones((2, 3, 4)))
    assert T.reduce("sum", x, axis=1, keepdims=True).shape == (2, 1, 4)
    assert T.reduce("max", x, axis=(0, 2)).shape == (3,)
    with pytest.raises(T.ShapeError):
        T.reduce("mean", Tensor(np.ones((2, 0))), axis=1)
    with pytest.raises(T.ShapeError):
        T.reduce("sum", x, axis=3)


@pytest.mark.parametrize("kind", ["mean", "variance", "sum", "max"])
def test_reduce_grads(kind):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(3, 2))
    f = lambda t: (T.reduce(kind, t, axis=1) * Tensor(w)).sum()
    t = Tensor(x, requires_grad=True)
    f(t).backward()
    assert gc.rel_error(t.grad, fd(f, x.copy())) < 1e-6


# -- backward -----------------------------------------------------------------

def test_backward_examples():
    x = Tensor([0.0, 0.0, 0.0], requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    y = Tensor([1.0, 2.0], requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_accumulates_and_rejects_nonscalar():
    y = Tensor([1.0, 2.0], requires_grad=True)
    (y * y).sum().backward()
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [4.0, 8.0])
    with pytest.raises(T.ShapeError):
        T.backward(y * y)


def test_graph_is_topological_and_visits_once():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * a
    c = b + a
    d = (c * b).sum()
    g = T.Graph(d)
    order = g.nodes
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    assert order[-1] is d
    for t in order:
        for inp in (t.node.inputs if t.node is not None else ()):
            if inp.requires_grad:
                assert pos[id(inp)] < pos[id(t)]
    d.backward()
    # d = (a^2 + a) a^2 -> 4a^3 + 3a^2
    np.testing.assert_allclose(a.grad, 4 * a.data ** 3 + 3 * a.data ** 2, rtol=0, atol=1e-12)


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_backward_is_deterministic():
    rng = np.random.default_rng(4)
    xs, ks = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    grads = []
    for _ in range(2):
        x, k = Tensor(xs, requires_grad=True), Tensor(ks, requires_grad=True)
        (T.relu(T.conv2d(x, k, 1, 1)) ** 2.0).mean().backward()
        grads.append((x.grad.copy(), k.grad.copy()))
    assert grads[0][0].tobytes() == grads[1][0].tobytes()
    assert grads[0][1].tobytes() == grads[1][1].tobytes()


# -- conv / pool ----------------------------------------------------------------

def test_conv_ones_counts_overlap():
    out = T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), 1, 1).data[0]
    assert out[1, 1] == 9 and out[2, 2] == 9
    assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4
    assert out[0, 1] == 6


def test_conv_identity_kernel():
    x = np.random.default_rng(5).normal(size=(1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), 1, 1).data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(6)
    x, k = rng.normal(size=(2, 6, 7)), rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=1, allow_floor=True).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for o, i, j in itertools.product(range(3), range(out.shape[1]), range(out.shape[2])):
        ref[o, i, j] = (xp[:, 2 * i: 2 * i + 3, 2 * j: 2 * j + 3] * k[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_grads_fd(stride, pad):
    rng = np.random.default_rng(7)
    x, k = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=T.conv2d(Tensor(x), Tensor(k), stride, pad).shape)
    tx, tk = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
    (T.conv2d(tx, tk, stride, pad) * Tensor(w)).sum().backward()
    nx = fd(lambda t: (T.conv2d(t, Tensor(k), stride, pad) * Tensor(w)).sum(), x.copy())
    nk = fd(lambda t: (T.conv2d(Tensor(x), t, stride, pad) * Tensor(w)).sum(), k.copy())
    assert gc.rel_error(tx.grad, nx) < 1e-5
    assert gc.rel_error(tk.grad, nk) < 1e-5


def test_conv_errors():
    with pytest.raises(T.ShapeError, match="non-integer output extent"):
        T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), 1, 0)
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), 1, 1)


def test_conv_out_extent():
    assert T.conv_out_extent(28, 3, 2, 1, allow_floor=True) == 14
    assert T.conv_out_extent(7, 3, 2, 1) == 4
    with pytest.raises(T.ShapeError):
        T.conv_out_extent(6, 3, 2, 1)


def test_maxpool_values_and_grad():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = T.maxpool2d(Tensor(x), 3, 2, 1).data
    np.testing.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])
    t = Tensor(x, requires_grad=True)
    T.maxpool2d(t, 3, 2, 1).sum().backward()
    expect = np.zeros(16)
    expect[[5, 7, 13, 15]] = 1.0
    np.testing.assert_array_equal(t.grad.reshape(-1), expect)


# -- shape ops ------------------------------------------------------------------

def test_shape_op_grads():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4))
    m = rng.normal(size=(4, 2))
    f = lambda t: (T.concat([T.transpose(t, (0, 2, 1))[:, 1:, :], t.reshape(2, 4, 3)], axis=1).sum(axis=1)
                   @ Tensor(rng_fixed)).sum()
    rng_fixed = rng.normal(size=(3, 5))
    t = Tensor(x, requires_grad=True)
    f(t).backward()
    assert gc.rel_error(t.grad, fd(f, x.copy())) < 1e-7
    tm = Tensor(m, requires_grad=True)
    (Tensor(x[0]) @ tm).sum().backward()
    np.testing.assert_allclose(tm.grad, np.repeat(x[0].sum(axis=0)[:, None], 2, axis=1), atol=1e-12)


def test_fancy_index_accumulates():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


# -- serialization ----------------------------------------------------------------

def test_pxt1_layout_and_roundtrip(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    buf = T.tensor_to_bytes(a)
    assert buf[:4] == b"PXT1"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert int.from_bytes(buf[8:16], "little") == 2 and int.from_bytes(buf[16:24], "little") == 3
    assert np.frombuffer(buf[24:], "<f8").tolist() == a.reshape(-1).tolist()
    T.save_tensor(tmp_path / "a.pxt", a)
    assert T.load_tensor(tmp_path / "a.pxt").data.tobytes() == a.tobytes()
    with pytest.raises(ValueError):
        T.tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        T.tensor_from_bytes(buf[:-3])


# -- properties -----------------------------------------------------------------

shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4)


@st.composite
def broadcast_pair(draw):
    a = draw(shapes)
    b = [draw(st.sampled_from([d, 1])) for d in a]
    cut = draw(st.integers(0, len(b) - 1))
    return tuple(a), tuple(b[cut:])


@settings(max_examples=60, deadline=None)
@given(broadcast_pair(), st.integers(0, 2 ** 31))
def test_broadcast_mul_sum_matches_loop(pair, seed):
    sa, sb = pair
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    got = T.mul(Tensor(a), Tensor(b)).sum().item()
    bb = b.reshape((1,) * (len(sa) - len(sb)) + sb)
    ref = 0.0
    for idx in itertools.product(*(range(d) for d in sa)):
        ref += a[idx] * bb[tuple(i if d > 1 else 0 for i, d in zip(idx, bb.shape))]
    assert got == pytest.approx(ref, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_random_composite_gradient_property(seed):
    rng = np.random.default_rng(seed)
    errs = gc.tensor_trial(rng)
    assert max(errs.values()) < gc.THRESHOLD


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12))
def test_forward_outputs_finite(vals):
    x = Tensor(np.array(vals))
    for y in (T.sigmoid(x), T.relu(x), T.exp(-T.relu(x)), x.var(axis=0), x.max(axis=0)):
        assert np.isfinite(y.data).all()


def test_batch_norm_matches_composed_ops():
    rng = np.random.default_rng(21)
    x = T.Tensor(rng.normal(size=(3, 4, 5, 5)) * 3 + 1, requires_grad=True)
    gam = T.Tensor(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)
    bet = T.Tensor(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)
    w = rng.normal(size=x.shape)
    out, mu, var = T.batch_norm(x, gam, bet, (0, 2, 3), 1e-5)
    (out * w).sum().backward()
    fused = [p.grad.copy() for p in (x, gam, bet)]
    for p in (x, gam, bet):
        p.grad = None
    m = x.mean(axis=(0, 2, 3), keepdims=True)
    v = x.var(axis=(0, 2, 3), keepdims=True)
    ref = (x - m) / T.sqrt(v + 1e-5) * gam + bet
    (ref * w).sum().backward()
    np.testing.assert_allclose(out.data, ref.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(mu, m.data, rtol=0, atol=1e-14)
    np.testing.assert_allclose(var, v.data, rtol=0, atol=1e-12)
    for a, p in zip(fused, (x, gam, bet)):
        np.testing.assert_allclose(a, p.grad, rtol=0, atol=1e-10)
