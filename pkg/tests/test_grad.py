import numpy as np
import pytest

from bookrect.grad import (
    AttentionParams,
    ConfigError,
    GradTape,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    grad_check,
    layer_norm,
    linear,
    matmul,
    multi_head_attention,
    parameter,
    relu,
    softmax,
    split,
    tabs,
    tmean,
    tsum,
)


def rand(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, scale, size=shape)


def proj_loss(out, seed=99):
    """Smooth scalar loss: projection onto a fixed random direction.

    Keeps finite differences away from the kinks an abs-based loss would add.
    """
    w = Tensor(rand(out.shape, seed))
    return tsum(out * w)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, b)
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_arithmetic():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_closed_form_and_fd():
    # d sum(A @ B) / dA == ones @ B^T
    a = parameter(rand((3, 4), 1))
    b = parameter(rand((4, 2), 2))
    with GradTape() as tape:
        loss = tsum(matmul(a, b))
    tape.backward(loss)
    expected = np.ones((3, 2)) @ b.data.T
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)

    report = grad_check(lambda x, y: tsum(matmul(x, y)), [a, b])
    assert report.passed, report.summary()
    assert report.max_rel_err < 1e-4


def test_matmul_batched_fd():
    a = parameter(rand((2, 3, 4), 3))
    b = parameter(rand((2, 4, 3), 4))
    report = grad_check(lambda x, y: proj_loss(matmul(x, y)), [a, b])
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_one_by_one_identity():
    x = Tensor(rand((3, 6, 5), 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d(x, Tensor(w), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_ones_kernel_constant_image():
    c = 0.7
    x = Tensor(np.full((1, 5, 5), c))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, stride=1, padding=0)
    np.testing.assert_allclose(out.data, np.full((1, 3, 3), 9 * c), rtol=1e-12)


def test_conv2d_kernel_exceeds_input():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))), stride=1, padding=0)


@pytest.mark.parametrize(
    "xshape,wshape,stride,padding",
    [
        ((3, 7, 7), (2, 3, 5, 5), 1, 2),
        ((2, 6, 6), (4, 2, 3, 3), 2, 1),
        ((1, 5, 5), (2, 1, 3, 3), 1, 0),
    ],
)
def test_conv2d_fd(xshape, wshape, stride, padding):
    x = parameter(rand(xshape, 6))
    w = parameter(rand(wshape, 7, scale=0.5))
    b = parameter(rand((wshape[0],), 8))

    def f(xx, ww, bb):
        return proj_loss(conv2d(xx, ww, bb, stride=stride, padding=padding))

    report = grad_check(f, [x, w, b], max_entries_per_input=60)
    assert report.passed, report.summary()
    assert report.max_rel_err < 1e-4


# ---------------------------------------------------------------------------
# pointwise / norm / softmax


def test_relu_values():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=1e-12)


def test_softmax_normalization_property():
    x = Tensor(rand((4, 7), 9, scale=3.0))
    out = softmax(x, axis=1)
    assert np.all(out.data >= 0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_fd():
    x = parameter(rand((3, 5), 10))
    report = grad_check(lambda t: proj_loss(softmax(t, axis=-1)), [x])
    assert report.passed, report.summary()


def test_layer_norm_constant_vector():
    x = Tensor(np.full((1, 8), 3.3))
    g = Tensor(np.ones(8))
    b = Tensor(np.zeros(8))
    out = layer_norm(x, g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_fd():
    x = parameter(rand((4, 6), 11))
    g = parameter(1.0 + 0.1 * rand((6,), 12))
    b = parameter(0.1 * rand((6,), 13))
    report = grad_check(lambda xx, gg, bb: proj_loss(layer_norm(xx, gg, bb)), [x, g, b])
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# concat / split


def test_concat_split_grad_roundtrip_bitwise():
    a = parameter(rand((3, 4), 14))
    b = parameter(rand((3, 2), 15))
    direct_a = parameter(a.data.copy())
    direct_b = parameter(b.data.copy())

    with GradTape() as tape:
        joined = concat([a, b], axis=1)
        parts = split(joined, [4, 2], axis=1)
        loss = tsum(matmul(parts[0], Tensor(rand((4, 2), 16)))) + tsum(parts[1])
    tape.backward(loss)

    with GradTape() as tape2:
        loss2 = tsum(matmul(direct_a, Tensor(rand((4, 2), 16)))) + tsum(direct_b)
    tape2.backward(loss2)

    # concat-then-split is pure data movement: grads match bitwise
    assert np.array_equal(a.grad, direct_a.grad)
    assert np.array_equal(b.grad, direct_b.grad)


def test_split_equal_parts():
    t = Tensor(np.arange(12.0).reshape(2, 6))
    parts = split(t, 3, axis=1)
    assert [p.shape for p in parts] == [(2, 2)] * 3
    with pytest.raises(ShapeError):
        split(t, 5, axis=1)


# ---------------------------------------------------------------------------
# attention


def _attn_params(c, seed, identity=False):
    if identity:
        eye = np.eye(c)
        mk = lambda: parameter(eye.copy())
        zb = lambda: parameter(np.zeros(c))
        return AttentionParams(mk(), zb(), mk(), zb(), mk(), zb(), mk(), zb())
    rng = np.random.default_rng(seed)
    mk = lambda: parameter(rng.normal(0, 0.5, (c, c)))
    zb = lambda: parameter(rng.normal(0, 0.1, c))
    return AttentionParams(mk(), zb(), mk(), zb(), mk(), zb(), mk(), zb())


def test_attention_single_key_ignores_query():
    # with one key token the softmax weight is 1 regardless of the query
    c = 8
    p = _attn_params(c, 20)
    k = Tensor(rand((1, c), 21))
    v = Tensor(rand((1, c), 22))
    out1 = multi_head_attention(Tensor(rand((3, c), 23)), k, v, p, heads=2)
    out2 = multi_head_attention(Tensor(rand((3, c), 24, scale=5.0)), k, v, p, heads=2)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)
    expected_row = (v.data @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    np.testing.assert_allclose(out1.data, np.repeat(expected_row, 3, axis=0), atol=1e-12)


def test_attention_matches_hand_rolled_single_head():
    c = 4
    p = _attn_params(c, 0, identity=True)
    q = Tensor(np.eye(c)[:3])  # one-hot rows
    k = Tensor(np.eye(c)[:3])
    v = Tensor(np.eye(c)[:3])
    out = multi_head_attention(q, k, v, p, heads=1)

    # independent reference: plain scaled dot-product attention
    scale = 1.0 / np.sqrt(c)
    logits = (q.data @ np.eye(c)) @ (k.data @ np.eye(c)).T * scale
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    att = e / e.sum(axis=1, keepdims=True)
    expected = att @ v.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_attention_head_count_must_divide():
    p = _attn_params(6, 25)
    t = Tensor(rand((2, 6), 26))
    with pytest.raises(ConfigError):
        multi_head_attention(t, t, t, p, heads=4)


def test_attention_fd():
    c = 8
    p = _attn_params(c, 27)
    q = parameter(rand((3, c), 28))
    k = parameter(rand((3, c), 29))
    v = parameter(rand((3, c), 30))

    def f(qq, kk, vv, *ps):
        prm = AttentionParams(*ps)
        return proj_loss(multi_head_attention(qq, kk, vv, prm, heads=2))

    report = grad_check(f, [q, k, v] + p.tensors(), max_entries_per_input=24)
    assert report.passed, report.summary()
    assert report.max_rel_err < 1e-4


# ---------------------------------------------------------------------------
# grad_check harness


def test_grad_check_quadratic_exact():
    x = parameter(rand((5,), 31))
    with GradTape() as tape:
        loss = tsum(x * x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)
    report = grad_check(lambda t: tsum(t * t), [x])
    assert report.passed


def test_grad_check_constant_zero_gradient():
    x = parameter(rand((4,), 32))
    report = grad_check(lambda t: tsum(t * 0.0), [x])
    assert report.passed
    assert report.max_rel_err == 0.0


def test_abs_fd_away_from_kink():
    # |x| is non-smooth at 0; check the gradient where finite differences are valid
    x = parameter(2.0 + np.abs(rand((6,), 36)))
    report = grad_check(lambda t: tsum(tabs(t)), [x])
    assert report.passed, report.summary()
    np.testing.assert_allclose(x.grad, np.sign(x.data), rtol=1e-12)


def test_linear_fd():
    x = parameter(rand((5, 3), 33))
    w = parameter(rand((3, 4), 34))
    b = parameter(rand((4,), 35))
    report = grad_check(lambda xx, ww, bb: proj_loss(linear(xx, ww, bb)), [x, w, b])
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# tape behaviour


def test_tape_determinism():
    def run():
        a = parameter(rand((4, 4), 40))
        b = parameter(rand((4, 4), 41))
        with GradTape() as tape:
            out = relu(matmul(a, b))
            loss = tmean(tabs(out))
        tape.backward(loss)
        return a.grad.copy(), b.grad.copy()

    ga1, gb1 = run()
    ga2, gb2 = run()
    assert np.array_equal(ga1, ga2)
    assert np.array_equal(gb1, gb2)


def test_grad_accumulates_across_backward_calls():
    x = parameter(np.array([2.0]))
    with GradTape() as t1:
        l1 = tsum(x * x)
    t1.backward(l1, seed=0.5)
    with GradTape() as t2:
        l2 = tsum(x * x)
    t2.backward(l2, seed=0.5)
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)


def test_no_tape_is_forward_only():
    x = parameter(np.ones(3))
    out = tsum(x * x)
    assert out.requires_grad is False
    assert x.grad is None


def test_strict_add_shapes():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))
