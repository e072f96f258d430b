import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tumorseg import tensor as T
from tumorseg.tensor import Parameter, Tape, Tensor, backward

CURVATURE = np.array([[-1, 5, -1], [5, -16, 5], [-1, 5, -1]]) / 16.0


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for r in range(ho):
            for c in range(wo):
                s = b[o]
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            s += xp[ci, r * stride + i, c * stride + j] * w[o, ci, i, j]
                out[o, r, c] = s
    return out


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


# ---- matmul


def test_matmul_identity_and_scalar():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


@pytest.mark.parametrize("seed", range(20))
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    assert rel(out, naive_matmul(a, b)) <= 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# ---- conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 6))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.allclose(out.data, x)


def test_curvature_kernel_constant_image_is_exact_zero():
    x = np.full((1, 7, 7), 3.25)
    out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(CURVATURE[None, None]), None, pad=0)
    assert np.all(out.data == 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_conv_matches_nested_sum(seed):
    rng = np.random.default_rng(100 + seed)
    stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0)][seed % 4]
    side = 8 if stride == 1 else 9
    x = rng.normal(size=(3, side, side))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride, pad).data
    assert rel(got, naive_conv(x, w, b, stride, pad)) <= 1e-6


def test_conv_non_integral_output_rejected():
    with pytest.raises(T.ConfigurationError, match="non-integral"):
        T.conv2d(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=0)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 6))
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))
    b = Tensor(rng.normal(size=2))
    batched = T.conv2d(Tensor(x), w, b, 1, 1).data
    for i in range(2):
        assert np.allclose(batched[i], T.conv2d(Tensor(x[i]), w, b, 1, 1).data)


# ---- softmax


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([1.0, 1.0, 1.0]), 0).data, 1 / 3)
    out = T.softmax(Tensor(np.array([1000.0, 0.0, 0.0])), 0).data
    assert np.allclose(out, [1, 0, 0], atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(100))
def test_softmax_normalized(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5, size=(3, 4, 5))
    axis = seed % 3
    y = T.softmax(Tensor(x), axis).data
    assert np.all((y > 0) & (y < 1))
    assert np.allclose(y.sum(axis=axis), 1.0, atol=1e-6, rtol=0)


def test_softmax_bad_axis():
    with pytest.raises(T.DimensionError):
        T.softmax(Tensor(np.zeros((2, 2))), 2)


# ---- layer norm


def _ident(c):
    return Tensor(np.ones(c)), Tensor(np.zeros(c))


def test_layer_norm_constant_is_zero():
    g, b = _ident(4)
    assert np.allclose(T.layer_norm(Tensor(np.full((2, 4), 7.0)), g, b).data, 0.0)


def test_layer_norm_standardized_unchanged():
    v = np.array([-1.0, 1.0, -1.0, 1.0])
    g, b = _ident(4)
    out = T.layer_norm(Tensor(v, dtype=np.float64), g, b).data
    assert np.allclose(out, v, atol=1e-5)


def test_layer_norm_moments():
    rng = np.random.default_rng(1)
    g, b = _ident(16)
    out = T.layer_norm(Tensor(rng.normal(3, 4, size=(10, 16)), dtype=np.float64), g, b).data
    assert np.all(np.abs(out.mean(-1)) <= 1e-6)
    assert np.all(np.abs(out.var(-1) - 1) <= 1e-4)


def test_layer_norm_errors():
    with pytest.raises(T.DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))
    with pytest.raises(T.DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 3))), *_ident(4))


# ---- activations, pooling, upsampling


def test_activations():
    assert T.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
    assert T.activation(Tensor([2.0]), "leaky_relu").data[0] == 2.0
    assert T.activation(Tensor([-1.0], dtype=np.float64), "leaky_relu").data[0] == pytest.approx(-0.01)


def test_global_pool_constant():
    x = np.full((3, 5, 5), 2.5)
    assert np.allclose(T.avg_pool(Tensor(x), "global").data, 2.5)
    assert T.avg_pool(Tensor(x), "global").shape == (3, 1, 1)


def test_local_pool_interior_and_corner():
    out = T.avg_pool(Tensor(np.ones((1, 5, 5)), dtype=np.float64), "local", 3).data
    assert np.allclose(out[0, 1:-1, 1:-1], 1.0)
    assert out[0, 0, 0] == pytest.approx(4 / 9)
    assert out.shape == (1, 5, 5)


def test_local_pool_even_window_rejected():
    with pytest.raises(T.ConfigurationError):
        T.avg_pool(Tensor(np.ones((1, 4, 4))), "local", 2)


def test_upsample_identity_and_constant():
    x = np.random.default_rng(0).normal(size=(2, 3, 3))
    assert np.array_equal(T.upsample_bilinear(Tensor(x), 1).data, x)
    up = T.upsample_bilinear(Tensor(np.full((1, 3, 4), 0.7), dtype=np.float64), 3).data
    assert up.shape == (1, 9, 12)
    assert np.allclose(up, 0.7)


def test_upsample_ramp_half_pixel():
    # half-pixel centres: sources -0.25(clamped), 0.25, 0.75, 1.25(clamped)
    x = Tensor(np.array([[[0.0, 2.0]]]), dtype=np.float64)
    assert np.allclose(T.upsample_bilinear(x, 2).data[0, 0], [0.0, 0.5, 1.5, 2.0])


# ---- element-wise and shape suite


def test_mul_ones_concat_reshape():
    x = np.random.default_rng(2).normal(size=(2, 3))
    assert np.array_equal(T.mul(Tensor(x), Tensor(np.ones((2, 3)))).data, x)
    c = T.concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 5)))], axis=1)
    assert c.shape == (2, 8)
    t = Tensor(x)
    assert np.array_equal(T.reshape(T.reshape(t, (3, 2)), (2, 3)).data, t.data)


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3, 4, 4)))
    assert T.mul(a, Tensor(np.ones((2, 3, 1, 1)))).shape == (2, 3, 4, 4)
    with pytest.raises(T.DimensionError):
        T.mul(a, Tensor(np.ones((3, 1, 1))))
    with pytest.raises(T.DimensionError):
        T.add(a, Tensor(np.ones((2, 2, 4, 4))))
    with pytest.raises(T.DimensionError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


# ---- backward


def test_backward_sum_of_squares():
    x = Parameter(np.array([1.0, -2.0, 3.0]))
    unused = Parameter(np.ones(2))
    with Tape():
        loss = T.sum(x * x)
    backward(loss)
    assert np.allclose(x.grad, 2 * x.data)
    assert np.all(unused.grad == 0)


def test_backward_requires_scalar():
    x = Parameter(np.ones(3))
    with Tape():
        y = x * 2.0
    with pytest.raises(T.ContractError):
        backward(y)


def test_backward_visits_each_node_once():
    x = Parameter(np.ones(3))
    calls = []
    with Tape() as tape:
        y = x * 2.0
        z = y + y
        loss = T.sum(z)
    for node in tape.nodes:
        fn = node._backward
        node._backward = lambda g, fn=fn, node=node: (calls.append(id(node)), fn(g))[1]
    n = len(tape)
    backward(loss)
    assert len(calls) == n == len(set(calls))
    assert np.allclose(x.grad, 4.0)


@pytest.mark.parametrize("seed", range(20))
def test_scalar_parameter_fd(seed):
    rng = np.random.default_rng(seed)
    w = Parameter(np.array(rng.normal()), id="w")
    x = Tensor(rng.normal(size=(4,)), dtype=np.float64)
    def f():
        return T.sum(T.sigmoid(x * w) * T.leaky_relu(x + w))
    with Tape():
        loss = f()
    backward(loss)
    h = 1e-4
    w0 = float(w.data)
    w.data = np.array(w0 + h)
    up = f().item()
    w.data = np.array(w0 - h)
    down = f().item()
    num = (up - down) / (2 * h)
    assert abs(w.grad - num) / max(abs(num), 1e-12) < 1e-6


def _proj(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


OP_CASES = {
    "matmul": lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], lambda p: T.matmul(p[0], p[1])),
    "matmul_batched": lambda rng: ([rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))], lambda p: T.matmul(p[0], p[1])),
    "conv2d": lambda rng: (
        [rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)],
        lambda p: T.conv2d(p[0], p[1], p[2], stride=2, pad=1),
    ),
    "softmax": lambda rng: ([rng.normal(size=(3, 4))], lambda p: T.softmax(p[0], axis=1)),
    "layer_norm": lambda rng: ([rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)], lambda p: T.layer_norm(*p)),
    "sigmoid": lambda rng: ([rng.normal(size=(6,))], lambda p: T.sigmoid(p[0])),
    "leaky_relu": lambda rng: ([rng.normal(size=(6,))], lambda p: T.leaky_relu(p[0])),
    "relu": lambda rng: ([rng.normal(size=(6,))], lambda p: T.relu(p[0])),
    "log_clipped": lambda rng: ([rng.uniform(0.1, 1.0, size=(6,))], lambda p: T.log_clipped(p[0])),
    "global_pool": lambda rng: ([rng.normal(size=(2, 4, 4))], lambda p: T.avg_pool(p[0], "global")),
    "local_pool": lambda rng: ([rng.normal(size=(2, 4, 4))], lambda p: T.avg_pool(p[0], "local", 3)),
    "curvature": lambda rng: ([rng.normal(size=(2, 4, 4))], lambda p: T.depthwise_conv2d(p[0], CURVATURE, 1)),
    "upsample": lambda rng: ([rng.normal(size=(2, 3, 3))], lambda p: T.upsample_bilinear(p[0], 2)),
    "mul_broadcast": lambda rng: ([rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 1, 1))], lambda p: T.mul(p[0], p[1])),
    "add_broadcast": lambda rng: ([rng.normal(size=(2, 3, 3)), rng.normal(size=(1, 3, 3))], lambda p: T.add(p[0], p[1])),
    "div": lambda rng: ([rng.normal(size=(4,)), rng.uniform(1, 2, size=(4,))], lambda p: T.div(p[0], p[1])),
    "concat": lambda rng: ([rng.normal(size=(2, 3)), rng.normal(size=(2, 2))], lambda p: T.concat(p, axis=1)),
    "reshape": lambda rng: ([rng.normal(size=(2, 6))], lambda p: T.reshape(p[0], (3, 4))),
    "transpose": lambda rng: ([rng.normal(size=(2, 3, 4))], lambda p: T.transpose(p[0], (2, 0, 1))),
    "sum_axis": lambda rng: ([rng.normal(size=(2, 3, 4))], lambda p: T.sum(p[0], axis=(1, 2))),
    "mean": lambda rng: ([rng.normal(size=(2, 3))], lambda p: T.mean(p[0], axis=0)),
    "gather": lambda rng: ([rng.normal(size=(2, 4, 2, 2))], lambda p: T.gather_channels(p[0], np.array([[3, 1], [0, 2]]))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(name, seed, fd_check):
    rng = np.random.default_rng(1000 + seed)
    arrays, op = OP_CASES[name](rng)
    out_shape = op([Tensor(a, dtype=np.float64) for a in arrays]).shape
    proj = _proj(rng, out_shape)
    assert fd_check(lambda p: T.sum(op(p) * proj), arrays) < 1e-5


# ---- sgd


def test_sgd_examples():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    T.sgd_step([p], 0.01)
    assert p.data[0] == pytest.approx(0.995)
    assert p.grad[0] == 0.5
    q = Parameter(np.array([2.0]))
    T.sgd_step([q], 0.3)
    assert q.data[0] == 2.0


def test_sgd_two_steps_on_square():
    w = Parameter(np.array(1.0, dtype=np.float64))
    for _ in range(2):
        w.zero_grad()
        with Tape():
            loss = T.sum(w * w)
        backward(loss)
        T.sgd_step([w], 0.1)
    assert float(w.data) == pytest.approx(0.64, abs=1e-15)


def test_sgd_rejects_non_positive_lr():
    with pytest.raises(T.ConfigurationError):
        T.sgd_step([], 0.0)


# ---- rng


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_rng_reproducible(seed):
    a, b = T.Rng(seed), T.Rng(seed)
    assert np.array_equal(a.uniform(-1, 1, 10), b.uniform(-1, 1, 10))
    assert np.array_equal(a.permutation(7), b.permutation(7))
