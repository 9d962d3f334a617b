"""Finite-difference verification of every backward kernel (64-bit)."""

import numpy as np
import pytest

from hpac import numerics as nm
from hpac import scan

REL_TOL = 1e-4


def _fd_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar-valued fn at x (float64)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(x)
        flat[i] = orig - eps
        dn = fn(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2 * eps)
    return g


def _rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def _loss_weights(rng, shape):
    # fixed random projection so the scalar loss exercises all outputs
    return rng.normal(size=shape)


@pytest.fixture
def rng64():
    return np.random.default_rng(2024)


def test_conv2d_masked_grads(rng64):
    x = rng64.normal(size=(2, 3, 6, 5))
    w = rng64.normal(size=(4, 3, 3, 3))
    mask = scan.build_mask("permissive", 3, 1).bits
    lw = _loss_weights(rng64, (2, 4, 6, 5))

    def loss_x(xx):
        return float((nm.conv2d_masked(xx, w, mask) * lw).sum())

    def loss_w(ww):
        return float((nm.conv2d_masked(x, ww, mask) * lw).sum())

    dx, dw, db = nm.conv2d_masked_backward(lw, x, w, mask)
    assert _rel_err(dx, _fd_grad(loss_x, x.copy())) < REL_TOL
    fd_w = _fd_grad(loss_w, w.copy())
    assert _rel_err(dw, fd_w) < REL_TOL
    # masked-out taps receive exactly zero gradient
    assert (dw[:, :, mask == 0] == 0).all()
    assert np.allclose(db, lw.sum(axis=(0, 2, 3)))


def test_conv2d_mask_absorption(rng64):
    # conv(x, W, mask) == conv(x, W * mask, full) exactly
    x = rng64.normal(size=(1, 2, 5, 5))
    w = rng64.normal(size=(3, 2, 3, 3))
    mask = scan.build_mask("strict", 3, 2).bits
    full = np.ones((3, 3), dtype=np.int8)
    wm = w * mask[None, None]
    np.testing.assert_array_equal(
        nm.conv2d_masked(x, w, mask), nm.conv2d_masked(x, wm, full))


def test_depthwise_grads(rng64):
    x = rng64.normal(size=(2, 4, 5, 6))
    w = rng64.normal(size=(4, 1, 3, 3))
    mask = scan.build_mask("permissive", 3, 2).bits
    lw = _loss_weights(rng64, x.shape)

    def loss_x(xx):
        return float((nm.depthwise_conv2d(xx, w, mask=mask) * lw).sum())

    def loss_w(ww):
        return float((nm.depthwise_conv2d(x, ww, mask=mask) * lw).sum())

    dx, dw, _ = nm.depthwise_conv2d_backward(lw, x, w, mask=mask)
    assert _rel_err(dx, _fd_grad(loss_x, x.copy())) < REL_TOL
    assert _rel_err(dw, _fd_grad(loss_w, w.copy())) < REL_TOL
    assert (dw[:, :, mask == 0] == 0).all()


def test_pointwise_and_linear_grads(rng64):
    x = rng64.normal(size=(2, 3, 4, 4))
    w = rng64.normal(size=(5, 3))
    lw = _loss_weights(rng64, (2, 5, 4, 4))
    dx, dw, db = nm.pointwise_backward(lw, x, w)
    assert _rel_err(dx, _fd_grad(
        lambda xx: float((nm.pointwise(xx, w) * lw).sum()), x.copy())) < REL_TOL
    assert _rel_err(dw, _fd_grad(
        lambda ww: float((nm.pointwise(x, ww) * lw).sum()), w.copy())) < REL_TOL

    xl = rng64.normal(size=(7, 3))
    lwl = _loss_weights(rng64, (7, 5))
    dxl, dwl, dbl = nm.linear_backward(lwl, xl, w)
    assert _rel_err(dxl, _fd_grad(
        lambda xx: float((nm.linear(xx, w) * lwl).sum()), xl.copy())) < REL_TOL
    assert _rel_err(dwl, _fd_grad(
        lambda ww: float((nm.linear(xl, ww) * lwl).sum()), w.copy())) < REL_TOL
    assert np.allclose(dbl, lwl.sum(axis=0))


def test_layer_norm_grads(rng64):
    x = rng64.normal(size=(3, 6, 2, 2))
    g = rng64.normal(size=6)
    b = rng64.normal(size=6)
    lw = _loss_weights(rng64, x.shape)

    dx, dg, db = nm.layer_norm_backward(lw, x, g, axis=1)
    assert _rel_err(dx, _fd_grad(
        lambda xx: float((nm.layer_norm(xx, g, b, axis=1) * lw).sum()),
        x.copy())) < REL_TOL
    assert _rel_err(dg, _fd_grad(
        lambda gg: float((nm.layer_norm(x, gg, b, axis=1) * lw).sum()),
        g.copy())) < REL_TOL
    assert _rel_err(db, _fd_grad(
        lambda bb: float((nm.layer_norm(x, g, bb, axis=1) * lw).sum()),
        b.copy())) < REL_TOL


@pytest.mark.parametrize("fwd,bwd", [
    (nm.swish, nm.swish_backward),
    (nm.gelu, nm.gelu_backward),
    (nm.softplus, nm.softplus_backward),
])
def test_activation_grads(rng64, fwd, bwd):
    x = rng64.normal(size=57) * 3
    lw = _loss_weights(rng64, x.shape)
    got = bwd(lw, x)
    fd = _fd_grad(lambda xx: float((fwd(xx) * lw).sum()), x.copy())
    assert _rel_err(got, fd) < REL_TOL


def test_softmax_grads(rng64):
    x = rng64.normal(size=(4, 6))
    lw = _loss_weights(rng64, x.shape)
    got = nm.softmax_backward(lw, x, axis=-1)
    fd = _fd_grad(lambda xx: float((nm.softmax(xx, axis=-1) * lw).sum()),
                  x.copy())
    assert _rel_err(got, fd) < REL_TOL
    assert np.allclose(nm.softmax(x).sum(axis=-1), 1.0)


def test_layer_scale_grads(rng64):
    x = rng64.normal(size=(2, 5, 3, 3))
    g = rng64.normal(size=5)
    lw = _loss_weights(rng64, x.shape)
    dx, dg = nm.layer_scale_backward(lw, x, g, axis=1)
    assert _rel_err(dx, _fd_grad(
        lambda xx: float((nm.layer_scale(xx, g) * lw).sum()), x.copy())) < REL_TOL
    assert _rel_err(dg, _fd_grad(
        lambda gg: float((nm.layer_scale(x, gg) * lw).sum()), g.copy())) < REL_TOL


def test_sigmoid_stable_extremes():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = nm.sigmoid(x)
    assert np.isfinite(s).all()
    assert s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5


def test_adam_decreases_quadratic():
    rng = np.random.default_rng(0)
    target = rng.normal(size=10)
    params = {"w": np.zeros(10)}
    state = nm.AdamState(params)
    for _ in range(400):
        g = 2 * (params["w"] - target)
        nm.adam_step(params, {"w": g}, state, lr=0.05)
    assert np.abs(params["w"] - target).max() < 1e-2


def test_adam_shape_mismatch_raises():
    params = {"w": np.zeros(3)}
    state = nm.AdamState(params)
    with pytest.raises(ValueError):
        nm.adam_step(params, {"w": np.zeros(4)}, state, lr=0.1)


def test_active_taps_row_major():
    mask = scan.build_mask("strict", 3, 2).bits
    assert nm.active_taps(mask) == [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    with pytest.raises(ValueError):
        nm.active_taps(np.ones((3, 4)))
