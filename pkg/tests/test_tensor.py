import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikeseg import tensor as tn
from spikeseg.errors import ConfigurationError, DimensionError

from conftest import central_diff, rel_err


def naive_conv(x, w, spec):
    """Scalar-loop cross-correlation, independent of the im2col path."""
    n, c, h, wd = x.shape
    k, s, p, r = spec.kernel, spec.stride, spec.padding, spec.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = spec.output_size(h), spec.output_size(wd)
    out = np.zeros((n, spec.out_channels, oh, ow))
    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                acc += w[o, ci, a, bb] * xp[b, ci, i * s + a * r, j * s + bb * r]
                    out[b, o, i, j] = acc
    return out


# -- conv forward --------------------------------------------------------------


def test_all_ones_sum(backend):
    spec = tn.ConvSpec(3, 1, 1)
    y = tn.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), spec)
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 9.0


def test_delta_kernel_is_identity(backend, rng):
    x = rng.normal(size=(2, 3, 7, 7))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y = tn.conv2d_forward(x, w, tn.ConvSpec(3, 3, 3, padding=1))
    np.testing.assert_array_equal(y, x)


def test_dilated_ramp_taps(backend):
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    y = tn.conv2d_forward(x, np.ones((1, 1, 3, 3)), tn.ConvSpec(3, 1, 1, dilation=2))
    expected = sum(x[0, 0, i, j] for i in (0, 2, 4) for j in (0, 2, 4))
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == expected


@pytest.mark.parametrize(
    "spec,hw",
    [
        (tn.ConvSpec(3, 2, 3, padding=1), 6),
        (tn.ConvSpec(3, 2, 3, padding=2, dilation=2), 7),
        (tn.ConvSpec(3, 2, 2, stride=2, padding=1), 7),
        (tn.ConvSpec(1, 4, 3), 5),
        (tn.ConvSpec(4, 1, 2, stride=2, padding=1), 6),
    ],
)
def test_matches_scalar_loop(backend, rng, spec, hw):
    x = rng.normal(size=(2, spec.in_channels, hw, hw))
    w = rng.normal(size=spec.weight_shape)
    np.testing.assert_allclose(tn.conv2d_forward(x, w, spec), naive_conv(x, w, spec), atol=1e-10)


def test_float32_agrees_with_reference(backend, rng):
    spec = tn.ConvSpec(3, 3, 4, padding=1)
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    w = rng.normal(size=spec.weight_shape).astype(np.float32)
    y = tn.conv2d_forward(x, w, spec)
    assert y.dtype == np.float32
    np.testing.assert_allclose(y, naive_conv(x.astype(np.float64), w.astype(np.float64), spec), atol=1e-5)


def test_bias_is_added(backend, rng):
    spec = tn.ConvSpec(1, 2, 3)
    x = rng.normal(size=(1, 2, 3, 3))
    w = rng.normal(size=spec.weight_shape)
    b = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(
        tn.conv2d_forward(x, w, spec, b), tn.conv2d_forward(x, w, spec) + b.reshape(1, 3, 1, 1)
    )


def test_shape_errors():
    spec = tn.ConvSpec(3, 2, 4)
    with pytest.raises(DimensionError):
        tn.conv2d_forward(np.zeros((1, 3, 5, 5)), np.zeros(spec.weight_shape), spec)
    with pytest.raises(DimensionError):
        tn.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((4, 2, 1, 1)), spec)
    with pytest.raises(DimensionError):
        tn.conv2d_forward(np.zeros((2, 5, 5)), np.zeros(spec.weight_shape), spec)
    with pytest.raises(ConfigurationError):
        tn.conv2d_forward(np.zeros((1, 2, 2, 2)), np.zeros(spec.weight_shape), spec)
    with pytest.raises(ConfigurationError):
        tn.ConvSpec(0, 1, 1)


def test_same_padding_preserves_size():
    for k, r in [(3, 1), (3, 2), (5, 3), (1, 1)]:
        spec = tn.ConvSpec(k, 1, 1, padding=tn.same_padding(k, r), dilation=r)
        assert spec.output_size(16) == 16


def test_chunking_is_batch_invariant(monkeypatch, rng):
    tn.set_backend("numpy")
    spec = tn.ConvSpec(3, 2, 3, padding=1)
    x = rng.normal(size=(5, 2, 6, 6)).astype(np.float32)
    w = rng.normal(size=spec.weight_shape).astype(np.float32)
    whole = tn.conv2d_forward(x, w, spec)
    monkeypatch.setattr(tn, "_COL_BUDGET", 2 * 18 * 36)
    chunked = tn.conv2d_forward(x, w, spec)
    np.testing.assert_array_equal(whole, chunked)
    tn.set_backend("auto")


def test_backends_agree(rng):
    pytest.importorskip("torch")
    spec = tn.ConvSpec(3, 3, 4, padding=2, dilation=2)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=spec.weight_shape)
    g = rng.normal(size=(2, 4, 8, 8))
    out = {}
    for b in tn.BACKENDS:
        tn.set_backend(b)
        out[b] = (tn.conv2d_forward(x, w, spec),) + tn.conv2d_backward(x, w, g, spec)
    tn.set_backend("auto")
    for a, b in zip(out["numpy"], out["torch"]):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ConfigurationError):
        tn.set_backend("cuda")


# -- conv backward ----------------------------------------------------------------


def test_zero_grad_out(backend, rng):
    spec = tn.ConvSpec(3, 2, 3, padding=1)
    x = rng.normal(size=(1, 2, 5, 5))
    gx, gw = tn.conv2d_backward(x, rng.normal(size=spec.weight_shape), np.zeros((1, 3, 5, 5)), spec)
    assert not gx.any() and not gw.any()


def test_single_pixel_chain_rule(backend):
    spec = tn.ConvSpec(1, 1, 1)
    gx, gw = tn.conv2d_backward(np.array([[[[3.0]]]]), np.array([[[[2.0]]]]), np.array([[[[5.0]]]]), spec)
    assert gw[0, 0, 0, 0] == 15.0 and gx[0, 0, 0, 0] == 10.0


@pytest.mark.parametrize("dilation", [1, 2])
def test_conv_finite_differences(backend, rng, dilation):
    spec = tn.ConvSpec(3, 2, 2, padding=dilation, dilation=dilation)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=spec.weight_shape)
    probe = rng.normal(size=(1, 2, 6, 6))

    def loss():
        return float((tn.conv2d_forward(x, w, spec) * probe).sum())

    gx, gw = tn.conv2d_backward(x, w, probe, spec)
    assert rel_err(gx, central_diff(loss, x, 1e-3)) < 1e-4
    assert rel_err(gw, central_diff(loss, w, 1e-3)) < 1e-4


def test_strided_conv_finite_differences(backend, rng):
    spec = tn.ConvSpec(3, 2, 2, stride=2, padding=1)
    x = rng.normal(size=(1, 2, 7, 7))
    w = rng.normal(size=spec.weight_shape)
    probe = rng.normal(size=(1, 2, 4, 4))
    gx, gw = tn.conv2d_backward(x, w, probe, spec)
    loss = lambda: float((tn.conv2d_forward(x, w, spec) * probe).sum())  # noqa: E731
    assert rel_err(gx, central_diff(loss, x, 1e-3)) < 1e-4
    assert rel_err(gw, central_diff(loss, w, 1e-3)) < 1e-4


# -- transposed conv -----------------------------------------------------------------


def test_transpose_zero_input(backend):
    spec = tn.upsample_spec(2, 3)
    y = tn.transpose_conv_forward(np.zeros((1, 2, 3, 3)), np.ones((2, 3, 4, 4)), spec)
    assert y.shape == (1, 3, 6, 6) and not y.any()


def test_transpose_single_tap(backend, rng):
    # one input pixel scatters v * w onto the output, cropped by the padding
    spec = tn.upsample_spec(1, 1)
    w = rng.normal(size=(1, 1, 4, 4))
    y = tn.transpose_conv_forward(np.full((1, 1, 1, 1), 2.5), w, spec)
    assert y.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(y[0, 0], 2.5 * w[0, 0, 1:3, 1:3])


def test_transpose_scatter_positions(backend):
    # input (i, j) lands on output rows s*i - p + a for kernel rows a
    spec = tn.upsample_spec(1, 1)
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 2] = 1.0
    w = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    y = tn.transpose_conv_forward(x, w, spec)[0, 0]
    expected = np.zeros((6, 6))
    for a in range(4):
        for b in range(4):
            r, c = 2 * 1 - 1 + a, 2 * 2 - 1 + b
            if 0 <= r < 6 and 0 <= c < 6:
                expected[r, c] += w[0, 0, a, b]
    np.testing.assert_array_equal(y, expected)


def test_transpose_finite_differences(backend, rng):
    spec = tn.upsample_spec(2, 2)
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(2, 2, 4, 4))
    probe = rng.normal(size=(1, 2, 8, 8))
    gx, gw = tn.transpose_conv_backward(x, w, probe, spec)
    loss = lambda: float((tn.transpose_conv_forward(x, w, spec) * probe).sum())  # noqa: E731
    assert rel_err(gx, central_diff(loss, x, 1e-3)) < 1e-4
    assert rel_err(gw, central_diff(loss, w, 1e-3)) < 1e-4


def test_transpose_rejects_non_doubling():
    spec = tn.ConvSpec(3, 1, 1, stride=2, padding=1)
    with pytest.raises(ConfigurationError):
        tn.transpose_conv_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), spec)
    with pytest.raises(DimensionError):
        tn.transpose_conv_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 2, 3, 3)), tn.upsample_spec(1, 1))


# -- pooling and interpolation ---------------------------------------------------------


def test_pool_constant():
    np.testing.assert_array_equal(tn.avg_pool2(np.full((1, 2, 4, 6), 3.0)), np.full((1, 2, 2, 3), 3.0))


def test_pool_window():
    assert tn.avg_pool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))[0, 0, 0, 0] == 2.5


def test_pool_backward_uniform():
    g = tn.avg_pool2_backward(np.ones((1, 1, 2, 2)))
    assert g.shape == (1, 1, 4, 4) and np.all(g == 0.25)


def test_pool_odd_dims():
    with pytest.raises(DimensionError):
        tn.avg_pool2(np.zeros((1, 1, 3, 4)))


def test_pool_finite_differences(rng):
    x = rng.normal(size=(2, 2, 4, 6))
    probe = rng.normal(size=(2, 2, 2, 3))
    loss = lambda: float((tn.avg_pool2(x) * probe).sum())  # noqa: E731
    assert rel_err(tn.avg_pool2_backward(probe), central_diff(loss, x, 1e-3)) < 1e-4


def test_bilinear_identity(rng):
    x = rng.normal(size=(1, 2, 5, 3))
    np.testing.assert_allclose(tn.bilinear_upsample(x, 5, 3), x, atol=1e-15)


def test_bilinear_ramp():
    x = np.array([[[[0.0, 1.0], [0.0, 1.0]]]])
    y = tn.bilinear_upsample(x, 4, 4)
    for row in y[0, 0]:
        np.testing.assert_allclose(row, [0, 1 / 3, 2 / 3, 1], atol=1e-15)


def test_bilinear_finite_differences(rng):
    x = rng.normal(size=(1, 3, 4, 4))
    probe = rng.normal(size=(1, 3, 8, 8))
    loss = lambda: float((tn.bilinear_upsample(x, 8, 8) * probe).sum())  # noqa: E731
    assert rel_err(tn.bilinear_upsample_backward(probe, 4, 4), central_diff(loss, x, 1e-3)) < 1e-5


def test_bilinear_rejects_shrinking():
    with pytest.raises(ConfigurationError):
        tn.bilinear_upsample(np.zeros((1, 1, 4, 4)), 2, 4)


# -- properties ----------------------------------------------------------------------


conv_cases = st.tuples(
    st.integers(1, 3),  # kernel
    st.integers(1, 3),  # c_in
    st.integers(1, 3),  # c_out
    st.integers(1, 2),  # stride
    st.integers(1, 2),  # dilation
    st.integers(0, 2),  # padding
    st.integers(5, 9),  # size
    st.integers(0, 2**31 - 1),
)


@given(conv_cases)
def test_conv_adjoint_consistency(case):
    k, ci, co, s, r, p, size, seed = case
    spec = tn.ConvSpec(k, ci, co, stride=s, padding=p, dilation=r)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, ci, size, size))
    w = rng.normal(size=spec.weight_shape)
    dx = rng.normal(size=x.shape)
    y = tn.conv2d_forward(x, w, spec)
    g = rng.normal(size=y.shape)
    gx, gw = tn.conv2d_backward(x, w, g, spec)
    # <g, J dx> = <J^T g, dx>, and likewise for the weights
    lhs, rhs = float((g * tn.conv2d_forward(dx, w, spec)).sum()), float((gx * dx).sum())
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs), 1e-8)
    dw = rng.normal(size=w.shape)
    lhs, rhs = float((g * tn.conv2d_forward(x, dw, spec)).sum()), float((gw * dw).sum())
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs), 1e-8)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_transpose_adjoint_consistency(ci, co, size, seed):
    spec = tn.upsample_spec(ci, co)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, ci, size, size))
    w = rng.normal(size=(ci, co, 4, 4))
    g = rng.normal(size=(1, co, 2 * size, 2 * size))
    dx = rng.normal(size=x.shape)
    gx, _ = tn.transpose_conv_backward(x, w, g, spec)
    lhs, rhs = float((g * tn.transpose_conv_forward(dx, w, spec)).sum()), float((gx * dx).sum())
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs), 1e-8)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_bilinear_adjoint_consistency(h, w, dh, dw, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, h, w))
    oh, ow = h + dh, w + dw
    g = rng.normal(size=(1, 2, oh, ow))
    lhs = float((g * tn.bilinear_upsample(x, oh, ow)).sum())
    rhs = float((tn.bilinear_upsample_backward(g, h, w) * x).sum())
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_pool_backward_conserves_mass(c, h, w, seed):
    g = np.random.default_rng(seed).normal(size=(2, c, h, w))
    assert np.isclose(tn.avg_pool2_backward(g).sum(), g.sum())


def test_primitives_are_deterministic(rng):
    spec = tn.ConvSpec(3, 3, 4, padding=2, dilation=2)
    x = rng.normal(size=(3, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=spec.weight_shape).astype(np.float32)
    a = tn.conv2d_forward(x, w, spec)
    b = tn.conv2d_forward(x.copy(), w.copy(), spec)
    assert a.tobytes() == b.tobytes()
