import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check
from stackseg import functional as F
from stackseg.errors import ContractError, DimensionError
from stackseg.tensor import (Tape, Tensor, backward, bce_with_logits, concat, count_ops, exp, gelu, getitem,
                             log, matmul, mean, no_grad, power, relu, sigmoid, softmax, sqrt, stack, tanh,
                             tsum)


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


# ---- matmul ------------------------------------------------------------------
def test_matmul_identity():
    b = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_grad_finite_difference():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert check(lambda: tsum(matmul(a, b)), [a]) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---- conv2d ------------------------------------------------------------------
def naive_conv(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def test_conv_1x1_identity():
    x = np.random.default_rng(1).normal(size=(1, 5, 5))
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_delta_kernel_identity():
    x = np.random.default_rng(2).normal(size=(1, 6, 7))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(F.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    assert np.max(np.abs(out.data - naive_conv(x, w, b, stride, pad))) < 1e-12


@settings(max_examples=40, deadline=None)
@given(h=st.integers(3, 12), k=st.sampled_from([1, 2, 3, 5]), s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_output_shape(h, k, s, p):
    if h + 2 * p < k:
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, h, h))), Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p)
        return
    out = F.conv2d(Tensor(np.zeros((1, h, h))), Tensor(np.zeros((2, 1, k, k))), stride=s, padding=p)
    assert out.shape == (2, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)


def test_conv_grads():
    rng = np.random.default_rng(4)
    x, w, b = rand(rng, 2, 6, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)
    assert check(lambda: tsum(F.conv2d(x, w, b, stride=2, padding=1) ** 2), [x, w, b]) < 1e-4


def test_conv_transpose_matches_scatter_oracle():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 2, 2))
    out = F.conv_transpose2d(Tensor(x), Tensor(w), stride=2).data
    ref = np.zeros((3, 6, 8))
    for ci in range(2):
        for i in range(3):
            for j in range(4):
                ref[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2] += x[ci, i, j] * w[ci]
    assert np.max(np.abs(out - ref)) < 1e-12


def test_conv_transpose_grads():
    rng = np.random.default_rng(6)
    x, w, b = rand(rng, 2, 3, 3), rand(rng, 2, 3, 2, 2), rand(rng, 3)
    assert check(lambda: tsum(F.conv_transpose2d(x, w, b) ** 2), [x, w, b]) < 1e-4


# ---- softmax -----------------------------------------------------------------
def test_softmax_uniform():
    assert np.allclose(softmax(Tensor(np.zeros(3))).data, 1 / 3, atol=0, rtol=1e-15)


def test_softmax_large_logits_no_overflow():
    with np.errstate(over="raise"):
        out = softmax(Tensor([1000.0, 0.0])).data
    assert out[0] == 1.0 and 0 <= out[1] < 1e-300 + 1e-400


def test_softmax_matches_direct_formula():
    z = np.random.default_rng(7).normal(size=10)
    ref = np.exp(z) / np.exp(z).sum()
    assert np.max(np.abs(softmax(Tensor(z)).data - ref) / ref) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    out = softmax(Tensor(np.array(values))).data
    assert abs(out.sum() - 1) < 1e-12 and np.all(out > 0)


# ---- bilinear resize -----------------------------------------------------------
def test_resize_same_size_is_identity():
    x = np.random.default_rng(8).normal(size=(2, 5, 7))
    assert np.array_equal(F.bilinear_resize(Tensor(x), 5, 7).data, x)


@pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 5), (31, 31)])
def test_resize_constant_exact(size):
    x = np.full((2, 4, 6), 3.7)
    assert np.array_equal(F.bilinear_resize(Tensor(x), *size).data, np.full((2,) + size, 3.7))


def half_pixel_oracle(img, n_out):
    n_in = img.shape[0]
    scale = n_in / n_out

    def taps(o):
        s = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(s))
        hi = min(lo + 1, n_in - 1)
        return lo, hi, s - lo

    out = np.zeros((n_out, n_out))
    for i in range(n_out):
        y0, y1, fy = taps(i)
        for j in range(n_out):
            x0, x1, fx = taps(j)
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def test_resize_2x2_to_3x3_hand_values():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = F.bilinear_resize(Tensor(img[None]), 3, 3).data[0]
    # source coords (o + 0.5) * 2/3 - 0.5 = -1/6 (clamped to 0), 1/2, 7/6 (clamped to 1)
    hand = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    assert np.allclose(out, hand, atol=1e-15)
    assert np.allclose(out, half_pixel_oracle(img, 3), atol=1e-15)


def test_resize_grads():
    rng = np.random.default_rng(9)
    x = rand(rng, 2, 3, 5)
    w = rng.normal(size=(2, 7, 4))
    assert check(lambda: tsum(F.bilinear_resize(x, 7, 4) * Tensor(w)), [x]) < 1e-4


# ---- batch norm ----------------------------------------------------------------
def test_batchnorm_train_standardizes():
    # normalized variance is var / (var + eps); a wide input keeps that within 1e-6 of 1
    x = np.random.default_rng(10).normal(3.0, 20.0, size=(3, 8, 8))
    out = F.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True).data
    assert np.max(np.abs(out.mean(axis=(1, 2)))) < 1e-6
    assert np.max(np.abs(out.var(axis=(1, 2)) - 1)) < 1e-6


def test_batchnorm_zero_gamma_gives_beta():
    x = np.random.default_rng(11).normal(size=(2, 4, 4))
    out = F.batch_norm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)), np.zeros(2), np.ones(2), True)
    assert np.array_equal(out.data, np.full((2, 4, 4), 5.0))


def test_batchnorm_eval_formula():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 5, 5))
    mu, var, g, b = rng.normal(size=3), rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3)
    out = F.batch_norm2d(Tensor(x), Tensor(g), Tensor(b), mu.copy(), var.copy(), False).data
    ref = (x - mu[:, None, None]) / np.sqrt(var[:, None, None] + 1e-5) * g[:, None, None] + b[:, None, None]
    assert np.max(np.abs(out - ref) / np.abs(ref)) < 1e-10


def test_batchnorm_running_stats_momentum():
    x = np.random.default_rng(13).normal(size=(2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    assert np.allclose(rm, 0.1 * x.mean(axis=(1, 2)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(1, 2), ddof=1))


def test_batchnorm_grads():
    rng = np.random.default_rng(14)
    x, g, b = rand(rng, 2, 3, 3), rand(rng, 2), rand(rng, 2)
    w = Tensor(rng.normal(size=(2, 3, 3)))
    fn = lambda: tsum(F.batch_norm2d(x, g, b, np.zeros(2), np.ones(2), True) * w)
    assert check(fn, [x, g, b]) < 1e-4


# ---- backward mechanics --------------------------------------------------------
def test_sum_grad_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_relu_mask_grad():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    backward(tsum(relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0])


UNARY = {
    "exp": exp, "tanh": tanh, "sigmoid": sigmoid, "gelu": gelu,
    "square": lambda t: power(t, 2), "neg": lambda t: -t,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grads(name):
    rng = np.random.default_rng(15)
    x = rand(rng, 3, 4)
    w = Tensor(rng.normal(size=(3, 4)))
    assert check(lambda: tsum(UNARY[name](x) * w), [x]) < 1e-4


def test_positive_domain_grads():
    rng = np.random.default_rng(16)
    x = rand(rng, 5, lo=0.5, hi=2.0)
    assert check(lambda: tsum(log(x) + sqrt(x) + 1.0 / x), [x]) < 1e-4


def test_binary_broadcast_grads():
    rng = np.random.default_rng(17)
    a, b = rand(rng, 3, 4), rand(rng, 4)
    c = rand(rng, 3, 1, lo=0.5, hi=2.0)
    assert check(lambda: tsum((a + b) * a - b / c), [a, b, c]) < 1e-4


def test_shape_ops_grads():
    rng = np.random.default_rng(18)
    a, b = rand(rng, 2, 3), rand(rng, 2, 3)
    w = Tensor(rng.normal(size=(3, 4)))

    def fn():
        s = stack([a, b], axis=0).transpose(2, 0, 1).reshape(3, 4)
        c = concat([a, b], axis=1)
        return tsum(s * w) + tsum(getitem(c, (slice(None), slice(1, 4))) ** 2) + mean(a)
    assert check(fn, [a, b]) < 1e-4


def test_softmax_and_bce_grads():
    rng = np.random.default_rng(19)
    z = rand(rng, 3, 5)
    t = Tensor((rng.random((3, 5)) > 0.5).astype(float))
    w = Tensor(rng.normal(size=(3, 5)))
    assert check(lambda: tsum(softmax(z, axis=0) * w), [z]) < 1e-4
    assert check(lambda: bce_with_logits(z, t), [z]) < 1e-4


def test_layer_norm_linear_pointwise_grads():
    rng = np.random.default_rng(21)
    x, g, b = rand(rng, 4, 6), rand(rng, 6, lo=0.5, hi=1.5), rand(rng, 6)
    w, bias = rand(rng, 3, 6), rand(rng, 3)
    fmap, pw = rand(rng, 6, 2, 3), rand(rng, 2, 6)
    probe = Tensor(rng.normal(size=(4, 3)))

    def fn():
        h = relu(F.linear(F.layer_norm(x, g, b), w, bias))
        return tsum(h * probe) + tsum(F.pointwise(fmap, pw) ** 2)
    assert check(fn, [x, g, b, w, bias, fmap, pw]) < 1e-4


def test_composite_network_grads():
    """conv -> bn -> relu -> matmul -> softmax -> dice, every parameter checked."""
    from stackseg.losses import dice_loss
    rng = np.random.default_rng(20)
    x = Tensor(rng.uniform(-2, 2, (1, 6, 6)))
    w, b = rand(rng, 2, 1, 3, 3), rand(rng, 2)
    g, beta = rand(rng, 2, lo=0.5, hi=1.5), rand(rng, 2)
    m = rand(rng, 36, 36, lo=-0.3, hi=0.3)
    target = Tensor((rng.random((2, 36)) > 0.5).astype(float))

    def fn():
        h = relu(F.batch_norm2d(F.conv2d(x, w, b, padding=1), g, beta, np.zeros(2), np.ones(2), True))
        p = softmax(matmul(h.reshape(2, 36), m), axis=0)
        return dice_loss(p, target)
    assert check(fn, [w, b, g, beta, m], max_entries=30) < 1e-4


def test_backward_is_deterministic():
    def grads():
        rng = np.random.default_rng(21)
        x = rand(rng, 2, 6, 6)
        w = rand(rng, 3, 2, 3, 3)
        backward(tsum(gelu(F.conv2d(x, w, padding=1)) ** 2))
        return x.grad.copy(), w.grad.copy()
    a, b = grads(), grads()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_every_reachable_leaf_gets_grad_with_matching_shape():
    rng = np.random.default_rng(22)
    a, b, c = rand(rng, 2, 3), rand(rng, 3), rand(rng, 4)
    backward(tsum(a * b))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert c.grad is None


def test_grads_accumulate():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(x * 3.0))
    backward(tsum(x * 3.0))
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_tape_order():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = exp(a)
    c = b * a
    loss = tsum(c + b)
    tape = Tape.record(loss)
    pos = {id(e.output): i for i, e in enumerate(tape)}
    for e in tape:
        for inp in e.inputs:
            if id(inp) in pos:
                assert pos[id(inp)] < pos[id(e.output)]
    assert tape.ops()[-1] == "sum"
    assert tape.contains(b) and not tape.contains(Tensor([0.0]))


def test_backward_contract_errors():
    with pytest.raises(ContractError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)
    with pytest.raises(ContractError):
        backward(Tensor(3.0))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_op_counter_counts_multiplications():
    with count_ops() as c:
        matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
    assert c.mults == 60


def test_tensor_invariants():
    t = Tensor(np.arange(6).reshape(2, 3))
    assert t.dtype == np.float64 and t.size == int(np.prod(t.shape))
