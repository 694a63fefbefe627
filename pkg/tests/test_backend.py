import numpy as np
import pytest

from edgeflow3d import backend
from edgeflow3d.backend import py_ops

import reference

compiled = pytest.importorskip("edgeflow3d.backend._corecy", reason="compiled kernels absent")


@pytest.fixture(params=["zero", "periodic"])
def pad(request):
    return request.param


def test_default_backend_mixes_fastest_kernels():
    # auto routes convs through the BLAS-backed path and NMS through the
    # compiled kernel when present
    assert backend.backend_name() in ("auto", "python")
    assert backend.ops.conv3d_forward is py_ops.conv3d_forward
    if "compiled" in backend.available_backends():
        assert backend.ops.nms26 is compiled.nms26


def test_forward_matches_loop_oracle(rng, pad):
    x = rng.standard_normal((2, 2, 4, 5, 3))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    want = reference.conv3d_loops(x, w, b, pad)
    np.testing.assert_allclose(py_ops.conv3d_forward(x, w, b, pad), want, atol=1e-12)
    np.testing.assert_allclose(compiled.conv3d_forward(x, w, b, pad), want, atol=1e-12)


def test_backends_agree_on_gradients(rng, pad):
    x = rng.standard_normal((2, 3, 5, 4, 4))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    gy = rng.standard_normal((2, 4, 5, 4, 4))
    np.testing.assert_allclose(
        py_ops.conv3d_grad_input(gy, w, pad),
        compiled.conv3d_grad_input(gy, w, pad),
        atol=1e-12,
    )
    gw1, gb1 = py_ops.conv3d_grad_weight(x, gy, (3, 3, 3), pad)
    gw2, gb2 = compiled.conv3d_grad_weight(x, gy, (3, 3, 3), pad)
    np.testing.assert_allclose(gw1, gw2, atol=1e-12)
    np.testing.assert_allclose(gb1, gb2, atol=1e-12)


def test_grad_input_is_adjoint_of_forward(rng, pad):
    # <conv(x), gy> == <x, grad_input(gy)> defines the adjoint exactly.
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    gy = rng.standard_normal((1, 3, 4, 4, 4))
    y = py_ops.conv3d_forward(x, w, np.zeros(3), pad)
    gx = py_ops.conv3d_grad_input(gy, w, pad)
    assert np.vdot(y, gy) == pytest.approx(np.vdot(x, gx), rel=1e-12)


def test_grad_weight_is_directional_derivative(rng, pad):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    gy = rng.standard_normal((1, 2, 4, 4, 4))
    gw, gb = py_ops.conv3d_grad_weight(x, gy, (3, 3, 3), pad)
    dw = rng.standard_normal(w.shape) * 1e-6
    y0 = py_ops.conv3d_forward(x, w, np.zeros(2), pad)
    y1 = py_ops.conv3d_forward(x, w + dw, np.zeros(2), pad)
    assert np.vdot(y1 - y0, gy) == pytest.approx(np.vdot(dw, gw), rel=1e-4)
    assert gb == pytest.approx(gy.sum(axis=(0, 2, 3, 4)))


def test_periodic_forward_is_shift_covariant(rng):
    x = rng.standard_normal((1, 2, 6, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    shift = (2, 3, 1)
    xs = np.roll(x, shift, axis=(2, 3, 4))
    y = py_ops.conv3d_forward(x, w, b, "periodic")
    ys = py_ops.conv3d_forward(xs, w, b, "periodic")
    np.testing.assert_allclose(ys, np.roll(y, shift, axis=(2, 3, 4)), atol=1e-12)


def test_float32_kernels(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32)
    b = np.zeros(2, dtype=np.float32)
    y1 = py_ops.conv3d_forward(x, w, b)
    y2 = compiled.conv3d_forward(x, w, b)
    assert y1.dtype == np.float32 and y2.dtype == np.float32
    np.testing.assert_allclose(y1, y2, atol=1e-5)


def test_nms_backends_identical(rng):
    mag = np.abs(rng.standard_normal((9, 8, 7)))
    gx, gy, gz = rng.standard_normal((3, 9, 8, 7))
    a = py_ops.nms26(mag, gx, gy, gz)
    b = compiled.nms26(mag, gx, gy, gz)
    assert np.array_equal(a, b)


def test_nms_zero_gradient_never_survives():
    mag = np.zeros((4, 4, 4))
    g = np.zeros((4, 4, 4))
    assert not py_ops.nms26(mag, g, g, g).any()


def test_nms_keeps_ridge_only():
    # A sharp plane ridge normal to x: only the central plane survives.
    mag = np.zeros((7, 7, 7))
    mag[2, :, :] = 0.5
    mag[3, :, :] = 1.0
    mag[4, :, :] = 0.5
    gx = np.ones((7, 7, 7))
    gz = np.zeros((7, 7, 7))
    out = py_ops.nms26(mag, gx, gz, gz)
    assert out[3].all()
    assert not out[2].any() and not out[4].any()


def test_set_backend_roundtrip():
    original = backend.backend_name()
    try:
        backend.set_backend("python")
        assert backend.backend_name() == "python"
        backend.set_backend("compiled")
        assert backend.backend_name() == "compiled"
    finally:
        backend.set_backend(original)
