import numpy as np
import pytest

import oracles
from dlanac import diffcore as dc


def _scalar_probe(fwd, bwd, shape, rng):
    """Wrap a forward/backward pair as f(x) -> (<g, fwd(x)>, grad) for a fixed random g."""
    g = rng.standard_normal(fwd(rng.standard_normal(shape)).shape)

    def f(x):
        return float((g * fwd(x)).sum()), bwd(g, x)
    return f


@pytest.mark.parametrize("stride,pad,k,size", [(1, 1, 3, 6), (2, 1, 3, 6), (2, 1, 3, 7), (1, 0, 1, 5), (1, 2, 5, 6)])
def test_conv2d_matches_loops(stride, pad, k, size, rng):
    x = rng.standard_normal((3, size, size))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = dc.conv2d(x, w, b, stride=stride, pad=pad)
    np.testing.assert_allclose(got, oracles.conv2d_loops(x, w, b, stride, pad), atol=1e-10)


@pytest.mark.parametrize("stride,pad,k", [(2, 0, 2), (1, 1, 3), (2, 1, 3)])
def test_transposed_conv_matches_loops(stride, pad, k, rng):
    x = rng.standard_normal((3, 4, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(2)
    got = dc.transposed_conv2d(x, w, b, stride=stride, pad=pad)
    np.testing.assert_allclose(got, oracles.transposed_conv2d_loops(x, w, b, stride, pad), atol=1e-10)


def test_transposed_conv_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv^T(y)> when both use the same kernel and padding
    # 7px at stride 2 is covered exactly, so no input row is dropped by either side
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((5, 3, 3, 3))
    y = rng.standard_normal(dc.conv2d(x, w, stride=2, pad=1).shape)
    lhs = (dc.conv2d(x, w, stride=2, pad=1) * y).sum()
    back = dc.transposed_conv2d(y, w, stride=2, pad=1)
    assert back.shape == x.shape
    rhs = (x * back).sum()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_conv_accepts_single_or_batch(rng):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    single = dc.conv2d(x, w, pad=1)
    batch = dc.conv2d(x[None], w, pad=1)
    assert single.shape == (3, 5, 5)
    np.testing.assert_array_equal(single, batch[0])


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(dc.DimensionError):
        dc.conv2d(rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 4, 3, 3)))
    with pytest.raises(dc.DimensionError):
        dc.conv2d(rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 2, 2)))
    with pytest.raises(dc.DimensionError):
        dc.conv2d(rng.standard_normal((5, 5)), rng.standard_normal((3, 2, 3, 3)))
    with pytest.raises(dc.DimensionError):
        dc.conv2d(rng.standard_normal((2, 2, 2)), rng.standard_normal((3, 2, 5, 5)))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv_gradients(stride, pad, rng):
    x0 = rng.standard_normal((2, 2, 6, 6))
    w0 = rng.standard_normal((3, 2, 3, 3))
    b0 = rng.standard_normal(3)
    g = rng.standard_normal(dc.conv2d(x0, w0, b0, stride, pad).shape)

    def wrt(which):
        def f(v):
            args = {"x": x0, "w": w0, "b": b0}
            args[which] = v.reshape(args[which].shape)
            out, cache = dc.conv2d_forward(args["x"], args["w"], args["b"], stride, pad)
            grads = dict(zip("xwb", dc.conv2d_backward(g, cache)))
            return float((g * out).sum()), grads[which]
        return f

    for which, v in (("x", x0), ("w", w0), ("b", b0)):
        assert dc.grad_check(wrt(which), v) < 1e-6, which


def test_transposed_conv_gradients(rng):
    x0 = rng.standard_normal((2, 3, 3, 4))
    w0 = rng.standard_normal((3, 2, 2, 2))
    b0 = rng.standard_normal(2)
    g = rng.standard_normal(dc.transposed_conv2d(x0, w0, b0, 2, 0).shape)

    def wrt(which):
        def f(v):
            args = {"x": x0, "w": w0, "b": b0}
            args[which] = v.reshape(args[which].shape)
            out, cache = dc.transposed_conv2d_forward(args["x"], args["w"], args["b"], 2, 0)
            grads = dict(zip("xwb", dc.transposed_conv2d_backward(g, cache)))
            return float((g * out).sum()), grads[which]
        return f

    for which, v in (("x", x0), ("w", w0), ("b", b0)):
        assert dc.grad_check(wrt(which), v) < 1e-6, which


def test_elementwise_and_rowwise_gradients(rng):
    shape = (3, 5)
    cases = {
        "leaky_relu": (lambda x: dc.leaky_relu(x, 0.2),
                       lambda g, x: dc.leaky_relu_backward(g, x, 0.2)),
        "tanh": (np.tanh, lambda g, x: dc.tanh_backward(g, np.tanh(x))),
        "softmax": (dc.softmax_rows, lambda g, x: dc.softmax_rows_backward(g, dc.softmax_rows(x))),
        "l2norm": (dc.l2_normalize_rows, lambda g, x: dc.l2_normalize_rows_backward(g, x)),
    }
    for name, (fwd, bwd) in cases.items():
        f = _scalar_probe(fwd, bwd, shape, rng)
        assert dc.grad_check(f, rng.standard_normal(shape)) < 1e-6, name


def test_channel_concat_roundtrip(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 5, 4, 4))
    c = dc.channel_concat(a, b)
    assert c.shape == (2, 8, 4, 4)
    da, db = dc.channel_concat_backward(c, 3)
    np.testing.assert_array_equal(da, a)
    np.testing.assert_array_equal(db, b)
    with pytest.raises(dc.DimensionError):
        dc.channel_concat(a, rng.standard_normal((2, 5, 3, 4)))


def test_softmax_is_shift_stable():
    s = dc.softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(s, [[0.5, 0.5, 0.0]])


def test_l2_normalize_zero_row_maps_to_zero():
    m = np.array([[3.0, 4.0], [0.0, 0.0]])
    np.testing.assert_allclose(dc.l2_normalize_rows(m), [[0.6, 0.8], [0.0, 0.0]])
    np.testing.assert_array_equal(dc.l2_normalize_rows_backward(np.ones_like(m), m)[1], [0.0, 0.0])


def test_leaky_relu_slope_checked():
    with pytest.raises(ValueError):
        dc.leaky_relu(np.zeros(3), 1.0)


def test_parameter_accumulates_and_checks_shape():
    p = dc.Parameter(np.zeros((2, 2)))
    p.accumulate(np.ones((2, 2)))
    p.accumulate(np.ones((2, 2)))
    np.testing.assert_array_equal(p.grad, 2 * np.ones((2, 2)))
    with pytest.raises(dc.DimensionError):
        p.accumulate(np.ones(3))
    p.zero_grad()
    assert not p.grad.any()


def test_float64_mode_restores_dtype():
    assert dc.get_dtype() is np.float32
    with dc.float64_mode():
        assert dc.Parameter(np.zeros(2)).value.dtype == np.float64
    assert dc.get_dtype() is np.float32
    assert dc.Parameter(np.zeros(2)).value.dtype == np.float32


def test_grad_check_flags_wrong_gradient(rng):
    def f(x):
        return float((x ** 2).sum()), 3 * x
    assert dc.grad_check(f, rng.standard_normal(4)) > 0.3


def test_grad_check_rejects_nonfinite():
    def f(x):
        return float("nan"), np.zeros_like(x)
    with pytest.raises(dc.EvaluationError):
        dc.grad_check(f, np.zeros(2))
