import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcgan.diffcomp import (ShapeError, Tensor, concat, conv2d, conv_transpose2d, grad_check,
                            instance_norm, log_softmax, mean_pool2, no_grad, softmax,
                            upsample_bilinear, upsample_nearest)
from lcgan.diffcomp.gradcheck import relative_error
from lcgan.diffcomp.module import BatchNorm, Conv2d, InstanceNorm, Module, Parameter


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_conv(x, w, stride=1, pad=0, dil=1):
    """Direct nested-loop cross-correlation, the oracle for conv2d."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oc, ic, u, v] * xp[b, ic, i * stride + u * dil, j * stride + v * dil]
                    out[b, oc, i, j] = acc
    return out


def conv_matrix(in_shape, w, stride, pad):
    """Dense matrix M with conv2d(x) = M @ x.ravel(), built column by column."""
    size = int(np.prod(in_shape))
    cols = []
    for k in range(size):
        e = np.zeros(size)
        e[k] = 1.0
        cols.append(naive_conv(e.reshape(in_shape), w, stride, pad).ravel())
    return np.stack(cols, axis=1)


# -- forward examples -------------------------------------------------------------

def test_conv_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, 4.0)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_dilated_conv_matches_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=1, padding=2, dilation=2)
    assert out.shape == (2, 4, 8, 8)
    np.testing.assert_allclose(out.data, naive_conv(x, w, 1, 2, 2), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 0, 3), (1, 1, 3)])
def test_conv_matches_loops(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((1, 2, 9, 7))
    w = rng.standard_normal((3, 2, k, k))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, naive_conv(x, w, stride, pad), atol=1e-12)


def test_conv_channel_mismatch_reports_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\)"):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


def test_conv_transpose_size():
    out = conv_transpose2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 3, 4, 4))), stride=2, padding=1)
    assert out.shape == (1, 3, 8, 8)


def test_conv_transpose_single_pixel():
    out = conv_transpose2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_conv_transpose_matches_toeplitz():
    # conv_transpose2d is M^T y where M is the explicit conv matrix of the same kernel
    rng = np.random.default_rng(3)
    w = rng.standard_normal((1, 1, 3, 3))  # (Cin of convT, Cout of convT, k, k)
    y = rng.standard_normal((1, 1, 2, 2))
    m = conv_matrix((1, 1, 4, 4), w, stride=1, pad=0)  # 4x4 -> 2x2 forward conv
    expected = (m.T @ y.ravel()).reshape(1, 1, 4, 4)
    out = conv_transpose2d(Tensor(y), Tensor(w))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conv_transpose_is_adjoint(seed):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 0), (2, 1), (2, 0), (1, 1), (2, 1)][seed]
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 4, 4))
    cx = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    y = rng.standard_normal(cx.shape)
    # conv_transpose2d takes (Cin, Cout, k, k) = (channels of y, channels of x)
    ty = conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=pad).data
    if ty.shape != x.shape:  # output_size ambiguity with stride 2: compare on the overlap
        ty = ty[..., :x.shape[2], :x.shape[3]]
    assert abs(np.sum(cx * y) - np.sum(x * ty)) < 1e-8 * max(1.0, abs(np.sum(cx * y)))


def test_elementwise_examples():
    assert Tensor(np.zeros(1)).tanh().data[0] == 0.0
    assert Tensor(np.zeros(1)).sigmoid().data[0] == 0.5
    np.testing.assert_array_equal(mean_pool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data, [[[[2.5]]]])


def test_instance_norm_moments():
    x = Tensor(np.random.default_rng(4).standard_normal((2, 3, 16, 16)) * 5 + 3)
    y = instance_norm(x).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-6)
    v = x.data.var(axis=(2, 3))
    # eps sits inside the variance denominator, so the output variance is v/(v+eps)
    np.testing.assert_allclose(y.var(axis=(2, 3)), v / (v + 1e-5), atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-6)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(5).standard_normal((2, 4, 3, 3)) * 30)
    np.testing.assert_allclose(softmax(x).data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(x).data), softmax(x).data, atol=1e-12)


def test_upsample_bilinear_constant_and_shape():
    x = Tensor(np.full((1, 2, 4, 4), 3.0))
    out = upsample_bilinear(x, (16, 12))
    assert out.shape == (1, 2, 16, 12)
    np.testing.assert_allclose(out.data, 3.0)


# -- backward ---------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = t64(np.random.default_rng(0).standard_normal((3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_sum_of_squares():
    x = t64(np.random.default_rng(1).standard_normal((3, 4)))
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_every_reachable_leaf_gets_grad():
    a, b, c = t64(np.ones(3)), t64(np.ones(3)), t64(np.ones(3))
    ((a * b).sum() + (b * c).relu().sum()).backward()
    for t in (a, b, c):
        assert t.grad is not None and t.grad.shape == t.shape


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        (t64(np.ones(3)) * 2).backward()


def test_grads_accumulate_across_backward_calls():
    x = t64(np.arange(3.0))
    (x * 2).sum().backward()
    (x * 3).sum().backward()
    np.testing.assert_array_equal(x.grad, 5.0)


def test_frozen_parameter_never_accumulates():
    w = Parameter(np.ones((1, 1, 3, 3)))
    w.requires_grad = False
    x = t64(np.random.default_rng(2).standard_normal((1, 1, 5, 5)))
    conv2d(x, w).sum().backward()
    assert w.grad is None
    assert x.grad is not None


def test_no_grad_builds_no_graph():
    x = t64(np.ones(2))
    with no_grad():
        y = x * 3
    assert not y.requires_grad


def test_relu_derivative_at_zero_is_zero():
    x = t64(np.array([-1.0, 0.0, 2.0]))
    x.relu().sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_leaky_relu_slope():
    x = t64(np.array([-2.0, 3.0]))
    y = x.leaky_relu(0.2)
    np.testing.assert_allclose(y.data, [-0.4, 3.0])
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [0.2, 1.0])


def test_gradcheck_sum_of_squares_tight():
    x = t64(np.random.default_rng(3).standard_normal((4, 5)))
    report = grad_check(lambda: (x * x).sum(), {"x": x})
    assert report.passed
    assert report.max_relative_error < 1e-8


def test_gradcheck_reports_wrong_gradient():
    x = t64(np.random.default_rng(4).standard_normal(6))

    def wrong():
        # forward x^3 but claims derivative 2x
        return Tensor._make(x.data ** 3, (x,), lambda g: (g * 2 * x.data,)).sum()

    assert not grad_check(wrong, {"x": x}).passed


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0


OPS = {
    "add_broadcast": lambda a, b: (a + b[0:1]).sum(),
    "mul_div": lambda a, b: (a * b / (b * b + 1.0)).sum(),
    "pow_exp_log": lambda a, b: ((a ** 2 + 1.0).log() + (b * 0.3).exp()).sum(),
    "sqrt_abs": lambda a, b: ((a * a + 0.5).sqrt() + (b - 0.05).abs()).sum(),
    "tanh_sigmoid": lambda a, b: (a.tanh() * b.sigmoid()).sum(),
    "mean_var": lambda a, b: a.var(axis=1).sum() + (a * b).mean(),
    "getitem_reshape": lambda a, b: (a[1:, ::2].reshape(-1) * b[1:, ::2].reshape(-1)).sum(),
    "clip": lambda a, b: (a.clip(-0.7, 0.7) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_elementwise_ops_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((3, 4)))
    report = grad_check(lambda: OPS[name](a, b), {"a": a, "b": b})
    assert report.passed, report.summary()


LAYERS = {
    "conv_stride2": lambda x, w: (conv2d(x, w, stride=2, padding=1) ** 2).sum(),
    "conv_dilated": lambda x, w: (conv2d(x, w, padding=2, dilation=2) ** 2).sum(),
    "conv_transpose": lambda x, w: (conv_transpose2d(x, w[:, :2], stride=2, padding=1) ** 2).sum(),
    "instance_norm": lambda x, w: (instance_norm(conv2d(x, w, padding=1)) ** 3).sum(),
    "pool_upsample": lambda x, w: (upsample_nearest(mean_pool2(x), 2) * x).sum()
    + (upsample_bilinear(conv2d(x, w), (9, 11)) ** 2).sum(),
    "concat_logsoftmax": lambda x, w: (log_softmax(concat([x, conv2d(x, w, padding=1)], 1)) * x.mean()).sum(),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
@pytest.mark.parametrize("seed", range(5))
def test_layer_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((2, 3, 8, 8)))
    w = t64(rng.standard_normal((3, 3, 3, 3)) * 0.5)
    report = grad_check(lambda: LAYERS[name](x, w), {"x": x, "w": w}, max_entries=30, seed=seed)
    assert report.passed, report.summary()


@pytest.mark.parametrize("seed", range(5))
def test_composite_conv_norm_relu_mean(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((1, 2, 8, 8)))
    w = t64(rng.standard_normal((4, 2, 3, 3)))
    f = lambda: instance_norm(conv2d(x, w, padding=1)).relu().mean()
    report = grad_check(f, {"x": x, "w": w}, h=1e-5, kink_aware=True, seed=seed)
    assert report.passed, report.summary()


def test_batchnorm_train_and_eval():
    bn = BatchNorm(3).astype(np.float64)
    x = Tensor(np.random.default_rng(6).standard_normal((4, 3, 5, 5)) * 2 + 1)
    y = bn(x).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    assert not np.allclose(bn.running_mean, 0.0)
    bn.eval()
    y_eval = bn(x).data
    assert not np.allclose(y_eval, y)


def test_batchnorm_gradcheck():
    bn = BatchNorm(2).astype(np.float64)
    x = t64(np.random.default_rng(7).standard_normal((3, 2, 4, 4)))
    params = {"x": x}
    params.update(dict(bn.named_parameters()))
    report = grad_check(lambda: (bn(x) ** 3).sum(), params)
    assert report.passed, report.summary()


class _Tiny(Module):
    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(0)
        self.conv = Conv2d(1, 2, 3, padding=1, rng=rng)
        self.norm = InstanceNorm()

    def forward(self, x):
        return self.norm(self.conv(x))


def test_module_state_dict_roundtrip_and_strictness():
    a, b = _Tiny(), _Tiny()
    for p in b.parameters():
        p.data = p.data + 1.0
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    with pytest.raises(Exception):
        b.load_state_dict({"conv.weight": np.zeros((2, 1, 3, 3))})
    bad = a.state_dict()
    bad["conv.weight"] = np.zeros((3, 1, 3, 3))
    with pytest.raises(Exception):
        b.load_state_dict(bad)


def test_forward_is_deterministic():
    m = _Tiny()
    x = Tensor(np.random.default_rng(8).standard_normal((2, 1, 9, 9)).astype(np.float32))
    np.testing.assert_array_equal(m(x).data, m(x).data)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 12), w=st.integers(3, 12), k=st.integers(1, 3),
       stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_output_shape_formula(h, w, k, stride, pad):
    x = Tensor(np.zeros((1, 1, h, w)))
    out = conv2d(x, Tensor(np.zeros((1, 1, k, k))), stride=stride, padding=pad)
    assert out.shape[2:] == ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unbroadcast_gradient_shapes(seed):
    rng = np.random.default_rng(seed)
    a = t64(rng.standard_normal((3, 1, 4)))
    b = t64(rng.standard_normal((1, 5, 1)))
    (a * b).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (3, 5, 4)).sum(axis=1, keepdims=True))
