import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import helpers
from dlnet import autodiff as ad


def naive_conv2d(x, w, stride, pad):
    """Loop-level cross-correlation oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for q in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, q, i, j] = np.sum(patch * w[q])
    return out


# --- worked examples --------------------------------------------------------

def test_identity_kernel_conv():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = ad.conv2d(ad.constant(x), ad.constant(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_all_ones_conv_is_nine():
    out = ad.conv2d(ad.constant(np.ones((1, 1, 3, 3))), ad.constant(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_output_shape_formula():
    out = ad.conv2d(ad.constant(np.zeros((1, 1, 4, 4))), ad.constant(np.zeros((1, 1, 3, 3))), 2, 1)
    assert out.shape == (1, 1, 2, 2)


def test_conv_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        ad.conv2d(ad.constant(np.zeros((1, 2, 4, 4))), ad.constant(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_too_large():
    with pytest.raises(ad.DimensionError):
        ad.conv2d(ad.constant(np.zeros((1, 1, 2, 2))), ad.constant(np.zeros((1, 1, 5, 5))))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (3, 2, 3), (2, 0, 1)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    np.testing.assert_allclose(ad.conv2d(ad.constant(x), ad.constant(w), stride, pad).data,
                               naive_conv2d(x, w, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("o,c", [(1, 8), (2, 5)])
@pytest.mark.parametrize("pad,k", [(0, 3), (1, 3), (0, 2), (1, 2)])
def test_conv_few_outputs_matches_oracle(o, c, pad, k):
    # stride 1 with fewer output than input channels takes the shifted-matmul path
    rng = np.random.default_rng(o * 100 + c + pad * 10 + k)
    x = rng.normal(size=(3, c, 7, 6))
    w = rng.normal(size=(o, c, k, k))
    y = ad.conv2d(ad.constant(x), ad.constant(w), 1, pad).data
    np.testing.assert_allclose(y, naive_conv2d(x, w, 1, pad), rtol=1e-12, atol=1e-12)

    g = rng.normal(size=y.shape)
    xt, wt = ad.Tensor(x, requires_grad=True), ad.Tensor(w, requires_grad=True)
    loss = ad.sum(ad.mul(ad.conv2d(xt, wt, 1, pad), ad.constant(g)))
    gw = ad.grad(loss, wt).data
    # kernel gradient oracle: correlate the padded input with the upstream gradient
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    want = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + y.shape[2], j:j + y.shape[3]]
            want[:, :, i, j] = np.einsum("nchw,nohw->oc", patch, g)
    np.testing.assert_allclose(gw, want, rtol=1e-12, atol=1e-12)
    err = ad.grad_check(lambda t: ad.sum(ad.mul(ad.conv2d(ad.constant(x), t, 1, pad), ad.constant(g))), w)
    assert err <= 1e-6


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (2, 0, 3), (1, 0, 2)])
def test_conv_transpose_is_adjoint(stride, pad, k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, k, k))
    y = ad.conv2d(ad.constant(x), ad.constant(w), stride, pad).data
    g = rng.normal(size=y.shape)
    back = ad.conv_transpose2d(ad.constant(g), ad.constant(w), stride, pad, (8, 8)).data
    assert np.sum(y * g) == pytest.approx(np.sum(x * back), rel=1e-12)


def test_conv_bias_broadcast():
    x = np.zeros((1, 1, 3, 3))
    out = ad.conv2d(ad.constant(x), ad.constant(np.ones((2, 1, 1, 1))), bias=ad.constant([1.0, -2.0]))
    np.testing.assert_array_equal(out.data[0, :, 0, 0], [1.0, -2.0])


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.mul(ad.constant([2.0, 3.0]), ad.constant([4.0, 5.0])).data, [8.0, 15.0])
    x = np.random.default_rng(1).normal(size=5)
    np.testing.assert_array_equal(ad.mul(ad.constant(x), ad.constant(np.ones(5))).data, x)
    np.testing.assert_array_equal(ad.sqrt(ad.constant([4.0, 9.0])).data, [2.0, 3.0])
    np.testing.assert_array_equal(ad.elementwise("scale", ad.constant([1.0, -2.0]), 3.0).data, [3.0, -6.0])


def test_sqrt_negative_is_domain_error():
    with pytest.raises(ad.DomainError, match="index"):
        ad.sqrt(ad.constant([1.0, -1.0]))


def test_elementwise_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.add(ad.constant(np.zeros(3)), ad.constant(np.zeros(4)))


def test_relu_examples():
    np.testing.assert_array_equal(ad.relu(ad.constant([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = np.abs(np.random.default_rng(2).normal(size=6))
    np.testing.assert_array_equal(ad.relu(ad.constant(x)).data, x)
    t = ad.tensor([-1.0, 2.0], requires_grad=True)
    np.testing.assert_array_equal(ad.grad(ad.sum(ad.relu(t)), t).data, [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    t = ad.tensor([0.0], requires_grad=True)
    assert ad.grad(ad.sum(ad.relu(t)), t).data[0] == 0.0


def test_reductions():
    assert ad.sq_norm(ad.constant([3.0, 4.0])).item() == 25.0
    assert ad.mean(ad.constant(np.zeros((3, 2)))).item() == 0.0
    assert ad.reduce("sum", ad.constant(np.ones(7))).item() == 7.0


def test_downsample_examples():
    x = np.random.default_rng(3).normal(size=(1, 1, 4, 4))
    assert ad.downsample(ad.constant(x), 1).data is not None
    np.testing.assert_array_equal(ad.downsample(ad.constant(x), 1).data, x)
    rows = np.repeat(np.arange(4.0)[:, None], 4, axis=1)[None, None]
    out = ad.downsample(ad.constant(rows), 2).data
    np.testing.assert_array_equal(out[0, 0], [[0.0, 0.0], [2.0, 2.0]])


def test_downsample_non_divisible():
    with pytest.raises(ad.DimensionError):
        ad.downsample(ad.constant(np.zeros((1, 1, 5, 4))), 2)


def test_downsample_gradient_fd():
    x = np.random.default_rng(4).normal(size=(1, 2, 6, 6))
    assert ad.grad_check(lambda t: ad.sq_norm(ad.downsample(t, 3)), x) < 1e-6


# --- backward ---------------------------------------------------------------

def test_sq_norm_gradient():
    t = ad.tensor([3.0, 4.0], requires_grad=True)
    np.testing.assert_allclose(ad.grad(ad.sq_norm(t), t).data, [6.0, 8.0])


def test_disconnected_leaf_gets_zeros():
    a = ad.tensor([1.0, 2.0], requires_grad=True)
    b = ad.tensor([[5.0, 6.0, 7.0]], requires_grad=True)
    grads = ad.grad(ad.sq_norm(a), [a, b])
    np.testing.assert_array_equal(grads[1].data, np.zeros((1, 3)))


def test_second_derivative_of_cube():
    t = ad.tensor([2.0], requires_grad=True)
    g = ad.grad(ad.sum(ad.mul(ad.mul(t, t), t)), t, create_graph=True)
    assert g.requires_grad
    assert ad.grad(ad.sum(g), t).item() == pytest.approx(12.0, abs=1e-12)


def test_backward_dict_and_accumulate():
    a = ad.tensor([1.0, -1.0], requires_grad=True)
    out = ad.backward(ad.sq_norm(ad.scale(a, 3.0)), accumulate=True)
    np.testing.assert_allclose(out[a].data, [18.0, -18.0])
    np.testing.assert_allclose(a.grad.data, [18.0, -18.0])


def test_non_scalar_root():
    t = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.DimensionError):
        ad.grad(ad.mul(t, t), t)
    with pytest.raises(ad.DimensionError):
        ad.backward(ad.mul(t, t))


def test_second_pass_on_freed_graph_fails():
    t = ad.tensor([1.0, 2.0], requires_grad=True)
    root = ad.sq_norm(ad.tanh(t))
    ad.grad(root, t)
    with pytest.raises(ad.GraphReleasedError):
        ad.grad(root, t)


def test_retained_graph_allows_second_pass():
    t = ad.tensor([1.0, 2.0], requires_grad=True)
    root = ad.sq_norm(ad.tanh(t))
    g1 = ad.grad(root, t, retain_graph=True).data
    np.testing.assert_array_equal(ad.grad(root, t).data, g1)


def test_no_grad_records_nothing():
    t = ad.tensor([1.0], requires_grad=True)
    with ad.no_grad():
        out = ad.mul(t, t)
    assert out.node is None and not out.requires_grad


def test_linearity_of_adjoints():
    rng = np.random.default_rng(5)
    x = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    f1 = ad.sq_norm(ad.tanh(x))
    f2 = ad.sum(ad.mul(x, ad.constant(rng.normal(size=(2, 3)))))
    together = ad.grad(ad.add(f1, f2), x, retain_graph=True).data
    apart = ad.grad(f1, x, retain_graph=True).data + ad.grad(f2, x, retain_graph=True).data
    np.testing.assert_allclose(together, apart, rtol=1e-13, atol=1e-15)


def test_evaluation_is_deterministic():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))

    def run():
        xt = ad.Tensor(x, requires_grad=True)
        y = ad.conv2d(xt, ad.constant(w), 1, 1)
        return y.data, ad.grad(ad.sq_norm(ad.tanh(y)), xt).data

    (a1, g1), (a2, g2) = run(), run()
    assert np.array_equal(a1, a2) and np.array_equal(g1, g2)


def test_einsum_rejects_one_sided_sum():
    with pytest.raises(ValueError):
        ad.einsum("ij,jk->k", ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 4))))


# --- grad_check itself ------------------------------------------------------

def test_grad_check_sq_norm():
    x = np.random.default_rng(7).normal(size=(4, 3))
    assert ad.grad_check(ad.sq_norm, x) < 1e-6


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(8)
    w = ad.constant(rng.normal(size=10))
    assert ad.grad_check(lambda t: ad.sum(ad.mul(t, w)), rng.normal(size=10)) < 1e-9


def test_grad_check_relu_kink_exclusion():
    x = np.array([-1.0, 0.0, 1.0])
    f = lambda t: ad.sum(ad.relu(t))  # noqa: E731
    # at the kink the central difference gives 1/2 against the subgradient 0
    assert ad.grad_check(f, x) == pytest.approx(0.5)
    assert ad.grad_check(f, x, skip=np.abs(x) < 1e-5) < 1e-9


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        ad.grad_check(ad.sq_norm, np.ones(2), eps=1e-2)
    with pytest.raises(ValueError):
        ad.grad_check(ad.sq_norm, np.ones(2), eps=1e-9)


def test_grad_check_reports_non_finite_coordinate():
    # only the +eps probe of coordinate 1 lands on the pole
    x = np.array([1.0, 0.0, 2.0])
    with pytest.raises(FloatingPointError, match="coordinate 1"), np.errstate(divide="ignore"):
        ad.grad_check(lambda t: ad.sum(ad.div(1.0, ad.sub(t, 1e-5))), x)


# --- properties -------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(helpers.primitive_cases()))
def test_primitive_gradients(name):
    assert helpers.worst_grad_error(name, 10, seed=1) <= 1e-5


def test_double_backward_composition():
    assert helpers.double_backward_error(seed=3) <= 1e-4


def test_conv_double_backward():
    rng = np.random.default_rng(9)
    w0 = rng.normal(size=(2, 2, 3, 3))
    x = ad.constant(rng.normal(size=(1, 2, 5, 5)))

    def gnorm(wt):
        wt = wt if wt.requires_grad else ad.Tensor(wt.data, requires_grad=True)
        with ad.enable_grad():
            xin = ad.Tensor(x.data, requires_grad=True)
            inner = ad.sq_norm(ad.tanh(ad.conv2d(xin, wt, 1, 1)))
            return ad.sq_norm(ad.grad(inner, xin, create_graph=True))

    wt = ad.Tensor(w0, requires_grad=True)
    analytic = ad.grad(gnorm(wt), wt).data
    assert ad.grad_check(gnorm, w0, analytic=analytic) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-5, 5)))
def test_sq_norm_gradient_property(x):
    t = ad.Tensor(x, requires_grad=True)
    np.testing.assert_allclose(ad.grad(ad.sq_norm(t), t).data, 2 * x, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2), st.integers(1, 4), st.integers(0, 10_000))
def test_conv_matches_oracle_property(stride, pad, k, seed):
    rng = np.random.default_rng(seed)
    h = k + int(rng.integers(0, 4))
    x = rng.normal(size=(1, 2, h, h))
    w = rng.normal(size=(2, 2, k, k))
    np.testing.assert_allclose(ad.conv2d(ad.constant(x), ad.constant(w), stride, pad).data,
                               naive_conv2d(x, w, stride, pad), rtol=1e-11, atol=1e-11)
