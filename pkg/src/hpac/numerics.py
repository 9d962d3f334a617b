"""Dense tensor kernels with explicit forward/backward pairs.

All floating-point compute in the codec lives here.  Kernels are plain
functions over numpy arrays: float32 by default, float64 when the caller
supplies float64 inputs (used for gradient verification).  There is no
autodiff tape; each forward has a matching backward that the model module
composes by hand.

Convolutions are evaluated tap-by-tap over the active mask entries, which
keeps masked kernels cheap (only ~half the taps of a causal kernel are
live) and makes the mask-absorption property exact.
"""

from __future__ import annotations

import os

import numpy as np

LN_EPS = 1e-5

_CHECK_FINITE = os.environ.get("HPAC_NO_FINITE_CHECK", "") == ""


def _finite(name, x):
    if _CHECK_FINITE and not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {name}")
    return x


def active_taps(mask):
    """Row-major (dr, dc) offsets of the nonzero mask entries.

    The mask must be square, odd-sized and binary.
    """
    mask = np.asarray(mask)
    k = mask.shape[0]
    if mask.shape != (k, k) or k % 2 == 0:
        raise ValueError(f"mask must be odd square, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    h = k // 2
    return [
        (dr, dc)
        for dr in range(-h, h + 1)
        for dc in range(-h, h + 1)
        if mask[dr + h, dc + h]
    ]


def _shift_slices(H, W, dr, dc):
    # output (r, c) reads input (r + dr, c + dc); both clipped to the map
    ro = slice(max(0, -dr), H - max(0, dr))
    co = slice(max(0, -dc), W - max(0, dc))
    ri = slice(max(0, dr), H + min(0, dr))
    ci = slice(max(0, dc), W + min(0, dc))
    return ro, co, ri, ci


def conv2d_masked(x, weight, mask, bias=None):
    """Masked dense convolution, zero padding, stride 1.

    x: [B, Cin, H, W]; weight: [Cout, Cin, k, k]; mask: [k, k] binary.
    Equals a standard convolution with weight * mask.
    """
    B, Cin, H, W = x.shape
    Cout, Cin_w, k, _ = weight.shape
    if Cin_w != Cin:
        raise ValueError(f"channel mismatch: x has {Cin}, weight has {Cin_w}")
    h = k // 2
    out = np.zeros((B, Cout, H, W), dtype=x.dtype)
    for dr, dc in active_taps(mask):
        ro, co, ri, ci = _shift_slices(H, W, dr, dc)
        w_tap = weight[:, :, dr + h, dc + h]
        out[:, :, ro, co] += np.einsum(
            "oi,bihw->bohw", w_tap, x[:, :, ri, ci], optimize=True
        )
    if bias is not None:
        out += bias[None, :, None, None]
    return _finite("conv2d_masked", out)


def conv2d_masked_backward(grad_out, x, weight, mask):
    """Returns (dx, dweight, dbias); dweight is zero at masked-out taps."""
    B, Cin, H, W = x.shape
    k = weight.shape[2]
    h = k // 2
    dx = np.zeros_like(x)
    dw = np.zeros_like(weight)
    for dr, dc in active_taps(mask):
        ro, co, ri, ci = _shift_slices(H, W, dr, dc)
        w_tap = weight[:, :, dr + h, dc + h]
        g = grad_out[:, :, ro, co]
        dx[:, :, ri, ci] += np.einsum("oi,bohw->bihw", w_tap, g, optimize=True)
        dw[:, :, dr + h, dc + h] = np.einsum(
            "bohw,bihw->oi", g, x[:, :, ri, ci], optimize=True
        )
    db = grad_out.sum(axis=(0, 2, 3))
    return dx, dw, db


def depthwise_conv2d(x, weight, mask=None, bias=None):
    """Depthwise convolution; weight: [C, 1, k, k], optional [k, k] mask."""
    B, C, H, W = x.shape
    Cw, one, k, _ = weight.shape
    if Cw != C or one != 1:
        raise ValueError(f"depthwise weight must be [C,1,k,k], got {weight.shape}")
    if mask is None:
        mask = np.ones((k, k), dtype=np.int8)
    h = k // 2
    out = np.zeros_like(x)
    for dr, dc in active_taps(mask):
        ro, co, ri, ci = _shift_slices(H, W, dr, dc)
        w_tap = weight[:, 0, dr + h, dc + h]
        out[:, :, ro, co] += w_tap[None, :, None, None] * x[:, :, ri, ci]
    if bias is not None:
        out += bias[None, :, None, None]
    return _finite("depthwise_conv2d", out)


def depthwise_conv2d_backward(grad_out, x, weight, mask=None):
    B, C, H, W = x.shape
    k = weight.shape[2]
    if mask is None:
        mask = np.ones((k, k), dtype=np.int8)
    h = k // 2
    dx = np.zeros_like(x)
    dw = np.zeros_like(weight)
    for dr, dc in active_taps(mask):
        ro, co, ri, ci = _shift_slices(H, W, dr, dc)
        w_tap = weight[:, 0, dr + h, dc + h]
        g = grad_out[:, :, ro, co]
        dx[:, :, ri, ci] += w_tap[None, :, None, None] * g
        dw[:, 0, dr + h, dc + h] = (g * x[:, :, ri, ci]).sum(axis=(0, 2, 3))
    db = grad_out.sum(axis=(0, 2, 3))
    return dx, dw, db


def linear(x, weight, bias=None):
    """x: [..., Cin]; weight: [Cout, Cin]."""
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return _finite("linear", out)


def linear_backward(grad_out, x, weight):
    dx = grad_out @ weight
    dw = np.tensordot(grad_out, x, axes=(range(x.ndim - 1), range(x.ndim - 1)))
    db = grad_out.reshape(-1, grad_out.shape[-1]).sum(axis=0)
    return dx, dw, db


def pointwise(x, weight, bias=None):
    """1x1 convolution on [B, C, H, W] maps (linear over the channel axis)."""
    out = np.einsum("oi,bihw->bohw", weight, x, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return _finite("pointwise", out)


def pointwise_backward(grad_out, x, weight):
    dx = np.einsum("oi,bohw->bihw", weight, grad_out, optimize=True)
    dw = np.einsum("bohw,bihw->oi", grad_out, x, optimize=True)
    db = grad_out.sum(axis=(0, 2, 3))
    return dx, dw, db


def layer_norm(x, gamma, beta, axis=-1, eps=LN_EPS):
    """Normalize over `axis` (the channel axis), then affine."""
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return _finite("layer_norm", out)


def layer_norm_backward(grad_out, x, gamma, axis=-1, eps=LN_EPS):
    C = x.shape[axis]
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    shape = [1] * x.ndim
    shape[axis] = C
    g = grad_out * gamma.reshape(shape)
    sum_axes = tuple(i for i in range(x.ndim) if i != (axis % x.ndim))
    dgamma = (grad_out * xhat).sum(axis=sum_axes)
    dbeta = grad_out.sum(axis=sum_axes)
    gm = g.mean(axis=axis, keepdims=True)
    gxm = (g * xhat).mean(axis=axis, keepdims=True)
    dx = inv * (g - gm - xhat * gxm)
    return dx, dgamma, dbeta


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x):
    return _finite("swish", x * sigmoid(x))


def swish_backward(grad_out, x):
    s = sigmoid(x)
    return grad_out * (s + x * s * (1.0 - s))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    return _finite("gelu", 0.5 * x * (1.0 + np.tanh(inner)))


def gelu_backward(grad_out, x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _finite("softmax", e / e.sum(axis=axis, keepdims=True))


def softmax_backward(grad_out, x, axis=-1):
    p = softmax(x, axis=axis)
    return p * (grad_out - (grad_out * p).sum(axis=axis, keepdims=True))


def softplus(x):
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def softplus_backward(grad_out, x):
    return grad_out * sigmoid(x)


def layer_scale(x, gamma, axis=1):
    """Per-channel multiplicative gate on the residual branch."""
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return _finite("layer_scale", x * gamma.reshape(shape))


def layer_scale_backward(grad_out, x, gamma, axis=1):
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    dx = grad_out * gamma.reshape(shape)
    sum_axes = tuple(i for i in range(x.ndim) if i != (axis % x.ndim))
    dgamma = (grad_out * x).sum(axis=sum_axes)
    return dx, dgamma


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place on `params`."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params
