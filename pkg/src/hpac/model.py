"""The autoregressive network: masked embedding, gated blocks, mixture head.

The network is a strict-masked 3x3 embedding followed by N blocks, each a
local context modulator (masked gated convolution), a channel MLP and a
spatial propagation module that convolves same-relative-position features
across the patch grid.  A 1x1 head emits per-pixel logistic mixture
parameters: K logits, K means and K raw scales per image channel.

Masked convolutions run per patch (zero padding at patch borders), so the
only cross-patch information flow is the propagation module.  This is the
training-parallel path; the coding path replays it group by group (see
csi.py) and must agree with it to ~1e-4.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .scan import build_mask

SCALE_FLOOR = 1e-3
PROB_FLOOR = 1e-10

_WEIGHTS_MAGIC = b"HPW1"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    channels: int = 128
    mlp_ratio: int = 4
    embed_kernel: int = 3
    block_kernel: int = 7
    spm_kernel: int = 3
    mixtures: int = 5
    patch: int = 32
    delta: int = 2
    bit_depth: int = 8
    v_min: float = -1.0
    v_max: float = 1.0
    channels_in: int = 3

    def with_bit_depth(self, b):
        return replace(self, bit_depth=b)


def default_config(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def fast_config(**kw) -> ModelConfig:
    base = dict(depth=2, channels=96, mixtures=3, patch=16, delta=1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_config(**kw) -> ModelConfig:
    """Desk-scale configuration for tests and the sanity training run."""
    base = dict(
        depth=2, channels=32, mlp_ratio=2, block_kernel=5, mixtures=2,
        patch=16, delta=1, channels_in=1,
    )
    base.update(kw)
    return ModelConfig(**base)


def _block_names(i):
    p = f"b{i}"
    names = []
    for mod in ("lcm", "mlp", "spm"):
        names += [f"{p}.{mod}.ln.g", f"{p}.{mod}.ln.b"]
        if mod == "mlp":
            names += [f"{p}.mlp.up.w", f"{p}.mlp.up.b",
                      f"{p}.mlp.down.w", f"{p}.mlp.down.b"]
        else:
            names += [f"{p}.{mod}.wa.w", f"{p}.{mod}.wa.b",
                      f"{p}.{mod}.wv.w", f"{p}.{mod}.wv.b",
                      f"{p}.{mod}.dw.w", f"{p}.{mod}.dw.b"]
        names += [f"{p}.{mod}.gamma"]
    return names


def param_names(config: ModelConfig):
    names = ["embed.w", "embed.b"]
    for i in range(config.depth):
        names += _block_names(i)
    names += ["head.w", "head.b"]
    return names


class ModelWeights:
    """Full parameter set as an ordered name -> array mapping."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        missing = set(param_names(config)) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")

    @property
    def dtype(self):
        return self.params["embed.w"].dtype

    def astype(self, dtype):
        return ModelWeights(
            self.config, {k: v.astype(dtype) for k, v in self.params.items()}
        )

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def param_count(self):
        return sum(v.size for v in self.params.values())

    def flat_blob(self):
        order = param_names(self.config)
        return b"".join(
            np.ascontiguousarray(self.params[k], dtype="<f4").tobytes() for k in order
        )

    def content_hash(self):
        digest = hashlib.sha256(self.flat_blob()).digest()
        return struct.unpack("<Q", digest[:8])[0]


def init_weights(config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32) -> ModelWeights:
    C = config.channels
    hidden = C * config.mlp_ratio
    k0, k, ks = config.embed_kernel, config.block_kernel, config.spm_kernel

    def u(shape, fan_in):
        lim = np.sqrt(1.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(dtype)

    p = {}
    p["embed.w"] = u((C, config.channels_in, k0, k0), config.channels_in * k0 * k0)
    p["embed.b"] = np.zeros(C, dtype=dtype)
    for i in range(config.depth):
        pref = f"b{i}"
        for mod, kk in (("lcm", k), ("spm", ks)):
            p[f"{pref}.{mod}.ln.g"] = np.ones(C, dtype=dtype)
            p[f"{pref}.{mod}.ln.b"] = np.zeros(C, dtype=dtype)
            p[f"{pref}.{mod}.wa.w"] = u((C, C), C)
            p[f"{pref}.{mod}.wa.b"] = np.zeros(C, dtype=dtype)
            p[f"{pref}.{mod}.wv.w"] = u((C, C), C)
            p[f"{pref}.{mod}.wv.b"] = np.zeros(C, dtype=dtype)
            p[f"{pref}.{mod}.dw.w"] = u((C, 1, kk, kk), kk * kk)
            p[f"{pref}.{mod}.dw.b"] = np.zeros(C, dtype=dtype)
            p[f"{pref}.{mod}.gamma"] = np.full(C, 1e-2, dtype=dtype)
        p[f"{pref}.mlp.ln.g"] = np.ones(C, dtype=dtype)
        p[f"{pref}.mlp.ln.b"] = np.zeros(C, dtype=dtype)
        p[f"{pref}.mlp.up.w"] = u((hidden, C), C)
        p[f"{pref}.mlp.up.b"] = np.zeros(hidden, dtype=dtype)
        p[f"{pref}.mlp.down.w"] = u((C, hidden), hidden)
        p[f"{pref}.mlp.down.b"] = np.zeros(C, dtype=dtype)
        p[f"{pref}.mlp.gamma"] = np.full(C, 1e-2, dtype=dtype)
    n_out = config.channels_in * config.mixtures * 3
    p["head.w"] = u((n_out, C), C)
    p["head.b"] = np.zeros(n_out, dtype=dtype)
    return ModelWeights(config, p)


# ---------------------------------------------------------------------------
# normalization / padding

def normalize(image, b, v_min=-1.0, v_max=1.0, dtype=np.float32):
    image = np.asarray(image)
    if image.min() < 0 or image.max() > 2**b - 1:
        raise ValueError(f"pixel values outside [0, {2**b - 1}]")
    return (image.astype(dtype) / 2**b * (v_max - v_min) + v_min).astype(dtype)


def denormalize(x, b, v_min=-1.0, v_max=1.0):
    """Inverse of normalize, as a real-valued pixel coordinate."""
    return (np.asarray(x) - v_min) * 2**b / (v_max - v_min)


def half_bin(b, v_min=-1.0, v_max=1.0):
    return (v_max - v_min) / 2 ** (b + 1)


def pad_value(b):
    """Pad pixel whose normalized value is exactly zero (mid-range)."""
    return 2 ** (b - 1)


def pad_to_patch(image, P, b):
    """Pad [..., H, W] on the bottom/right to multiples of P."""
    H, W = image.shape[-2:]
    Hp = -(-H // P) * P
    Wp = -(-W // P) * P
    if (Hp, Wp) == (H, W):
        return image
    pads = [(0, 0)] * (image.ndim - 2) + [(0, Hp - H), (0, Wp - W)]
    return np.pad(image, pads, constant_values=pad_value(b))


# ---------------------------------------------------------------------------
# layout rearrangements (pure transposes; their own inverses serve as backward)

def to_patches(x, P):
    B, C, H, W = x.shape
    gh, gw = H // P, W // P
    return (
        x.reshape(B, C, gh, P, gw, P)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(B * gh * gw, C, P, P)
    )


def from_patches(x, P, B, H, W):
    gh, gw = H // P, W // P
    return (
        x.reshape(B, gh, gw, x.shape[1], P, P)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(B, x.shape[1], H, W)
    )


def patches_to_grid(x, B, gh, gw):
    """[B*gh*gw, C, P, P] -> [B*P*P, C, gh, gw] (fixed relative position maps)."""
    n, C, P, _ = x.shape
    return (
        x.reshape(B, gh, gw, C, P, P)
        .transpose(0, 4, 5, 3, 1, 2)
        .reshape(B * P * P, C, gh, gw)
    )


def grid_to_patches(x, B, P):
    n, C, gh, gw = x.shape
    return (
        x.reshape(B, P, P, C, gh, gw)
        .transpose(0, 4, 5, 3, 1, 2)
        .reshape(B * gh * gw, C, P, P)
    )


# ---------------------------------------------------------------------------
# forward / backward

def cgm(x, wa, ba, wv, bv, dw, db, mask=None, grid=None):
    """Gated convolution: swish(DWConv(Wa x)) * (Wv x).

    `grid=(B, gh, gw, P)` switches the depthwise convolution to run over
    the patch grid (the propagation module); masks are rejected there.
    """
    if grid is not None and mask is not None:
        raise ValueError("grid-context gating is unmasked")
    a_pre = nm.pointwise(x, wa, ba)
    if grid is None:
        a = nm.depthwise_conv2d(a_pre, dw, mask=mask, bias=db)
    else:
        B, gh, gw, P = grid
        a = grid_to_patches(
            nm.depthwise_conv2d(patches_to_grid(a_pre, B, gh, gw), dw, bias=db), B, P
        )
    v = nm.pointwise(x, wv, bv)
    return nm.swish(a) * v


def forward(weights: ModelWeights, x_img, want_cache=False):
    """x_img: [B, Cin, Hp, Wp] normalized, Hp/Wp multiples of P.

    Returns mixture parameters [B, Cin, K, 3, Hp, Wp] (and the
    intermediate cache when requested for a backward pass).
    """
    cfg = weights.config
    p = weights.params
    B, Cin, H, W = x_img.shape
    P = cfg.patch
    if H % P or W % P:
        raise ValueError("input must be padded to patch multiples")
    if Cin != cfg.channels_in:
        raise ValueError("channel count mismatch")
    gh, gw = H // P, W // P
    strict = build_mask("strict", cfg.embed_kernel, cfg.delta).bits
    perm = build_mask("permissive", cfg.block_kernel, cfg.delta).bits

    cache = {"x_img_shape": (B, Cin, H, W)}
    xp = to_patches(x_img, P)
    cache["embed.in"] = xp
    X = nm.conv2d_masked(xp, p["embed.w"], strict, p["embed.b"])

    for i in range(cfg.depth):
        pref = f"b{i}"
        # local context modulator (masked gated convolution)
        cache[f"{pref}.lcm.in"] = X
        t = nm.layer_norm(X, p[f"{pref}.lcm.ln.g"], p[f"{pref}.lcm.ln.b"], axis=1)
        cache[f"{pref}.lcm.t"] = t
        a_pre = nm.pointwise(t, p[f"{pref}.lcm.wa.w"], p[f"{pref}.lcm.wa.b"])
        cache[f"{pref}.lcm.a_pre"] = a_pre
        a = nm.depthwise_conv2d(a_pre, p[f"{pref}.lcm.dw.w"], mask=perm,
                                bias=p[f"{pref}.lcm.dw.b"])
        cache[f"{pref}.lcm.a"] = a
        v = nm.pointwise(t, p[f"{pref}.lcm.wv.w"], p[f"{pref}.lcm.wv.b"])
        cache[f"{pref}.lcm.v"] = v
        out = nm.swish(a) * v
        cache[f"{pref}.lcm.out"] = out
        X = X + nm.layer_scale(out, p[f"{pref}.lcm.gamma"], axis=1)

        # channel MLP
        cache[f"{pref}.mlp.in"] = X
        t = nm.layer_norm(X, p[f"{pref}.mlp.ln.g"], p[f"{pref}.mlp.ln.b"], axis=1)
        cache[f"{pref}.mlp.t"] = t
        u = nm.pointwise(t, p[f"{pref}.mlp.up.w"], p[f"{pref}.mlp.up.b"])
        cache[f"{pref}.mlp.u"] = u
        ug = nm.gelu(u)
        cache[f"{pref}.mlp.ug"] = ug
        d = nm.pointwise(ug, p[f"{pref}.mlp.down.w"], p[f"{pref}.mlp.down.b"])
        cache[f"{pref}.mlp.d"] = d
        X = X + nm.layer_scale(d, p[f"{pref}.mlp.gamma"], axis=1)

        # spatial propagation across the patch grid
        cache[f"{pref}.spm.in"] = X
        t = nm.layer_norm(X, p[f"{pref}.spm.ln.g"], p[f"{pref}.spm.ln.b"], axis=1)
        cache[f"{pref}.spm.t"] = t
        a_pre = nm.pointwise(t, p[f"{pref}.spm.wa.w"], p[f"{pref}.spm.wa.b"])
        cache[f"{pref}.spm.a_pre"] = a_pre
        a_grid_in = patches_to_grid(a_pre, B, gh, gw)
        cache[f"{pref}.spm.a_grid_in"] = a_grid_in
        a = grid_to_patches(
            nm.depthwise_conv2d(a_grid_in, p[f"{pref}.spm.dw.w"],
                                bias=p[f"{pref}.spm.dw.b"]),
            B, P,
        )
        cache[f"{pref}.spm.a"] = a
        v = nm.pointwise(t, p[f"{pref}.spm.wv.w"], p[f"{pref}.spm.wv.b"])
        cache[f"{pref}.spm.v"] = v
        out = nm.swish(a) * v
        cache[f"{pref}.spm.out"] = out
        X = X + nm.layer_scale(out, p[f"{pref}.spm.gamma"], axis=1)

    cache["head.in"] = X
    raw = nm.pointwise(X, p["head.w"], p["head.b"])  # [N, Cin*K*3, P, P]
    out_img = from_patches(raw, P, B, H, W)
    params = out_img.reshape(B, Cin, cfg.mixtures, 3, H, W)
    if want_cache:
        return params, cache
    return params


def backward(weights: ModelWeights, cache, dparams):
    """Backpropagate a gradient on the mixture parameters to weight grads."""
    cfg = weights.config
    p = weights.params
    B, Cin, H, W = cache["x_img_shape"]
    P = cfg.patch
    gh, gw = H // P, W // P
    strict = build_mask("strict", cfg.embed_kernel, cfg.delta).bits
    perm = build_mask("permissive", cfg.block_kernel, cfg.delta).bits
    grads = {}

    d_raw = to_patches(
        dparams.reshape(B, Cin * cfg.mixtures * 3, H, W).astype(weights.dtype), P
    )
    dX, grads["head.w"], grads["head.b"] = nm.pointwise_backward(
        d_raw, cache["head.in"], p["head.w"]
    )

    for i in reversed(range(cfg.depth)):
        pref = f"b{i}"
        # spatial propagation
        d_out, grads[f"{pref}.spm.gamma"] = nm.layer_scale_backward(
            dX, cache[f"{pref}.spm.out"], p[f"{pref}.spm.gamma"], axis=1
        )
        a = cache[f"{pref}.spm.a"]
        v = cache[f"{pref}.spm.v"]
        d_a = nm.swish_backward(d_out * v, a)
        d_v = d_out * nm.swish(a)
        d_a_grid = patches_to_grid(d_a, B, gh, gw)
        d_a_grid_in, grads[f"{pref}.spm.dw.w"], grads[f"{pref}.spm.dw.b"] = (
            nm.depthwise_conv2d_backward(
                d_a_grid, cache[f"{pref}.spm.a_grid_in"], p[f"{pref}.spm.dw.w"]
            )
        )
        d_a_pre = grid_to_patches(d_a_grid_in, B, P)
        t = cache[f"{pref}.spm.t"]
        d_t, grads[f"{pref}.spm.wa.w"], grads[f"{pref}.spm.wa.b"] = (
            nm.pointwise_backward(d_a_pre, t, p[f"{pref}.spm.wa.w"])
        )
        d_t2, grads[f"{pref}.spm.wv.w"], grads[f"{pref}.spm.wv.b"] = (
            nm.pointwise_backward(d_v, t, p[f"{pref}.spm.wv.w"])
        )
        d_in, grads[f"{pref}.spm.ln.g"], grads[f"{pref}.spm.ln.b"] = (
            nm.layer_norm_backward(d_t + d_t2, cache[f"{pref}.spm.in"],
                                   p[f"{pref}.spm.ln.g"], axis=1)
        )
        dX = dX + d_in

        # channel MLP
        d_d, grads[f"{pref}.mlp.gamma"] = nm.layer_scale_backward(
            dX, cache[f"{pref}.mlp.d"], p[f"{pref}.mlp.gamma"], axis=1
        )
        d_ug, grads[f"{pref}.mlp.down.w"], grads[f"{pref}.mlp.down.b"] = (
            nm.pointwise_backward(d_d, cache[f"{pref}.mlp.ug"],
                                  p[f"{pref}.mlp.down.w"])
        )
        d_u = nm.gelu_backward(d_ug, cache[f"{pref}.mlp.u"])
        d_t, grads[f"{pref}.mlp.up.w"], grads[f"{pref}.mlp.up.b"] = (
            nm.pointwise_backward(d_u, cache[f"{pref}.mlp.t"], p[f"{pref}.mlp.up.w"])
        )
        d_in, grads[f"{pref}.mlp.ln.g"], grads[f"{pref}.mlp.ln.b"] = (
            nm.layer_norm_backward(d_t, cache[f"{pref}.mlp.in"],
                                   p[f"{pref}.mlp.ln.g"], axis=1)
        )
        dX = dX + d_in

        # local context modulator
        d_out, grads[f"{pref}.lcm.gamma"] = nm.layer_scale_backward(
            dX, cache[f"{pref}.lcm.out"], p[f"{pref}.lcm.gamma"], axis=1
        )
        a = cache[f"{pref}.lcm.a"]
        v = cache[f"{pref}.lcm.v"]
        d_a = nm.swish_backward(d_out * v, a)
        d_v = d_out * nm.swish(a)
        d_a_pre, grads[f"{pref}.lcm.dw.w"], grads[f"{pref}.lcm.dw.b"] = (
            nm.depthwise_conv2d_backward(d_a, cache[f"{pref}.lcm.a_pre"],
                                         p[f"{pref}.lcm.dw.w"], mask=perm)
        )
        t = cache[f"{pref}.lcm.t"]
        d_t, grads[f"{pref}.lcm.wa.w"], grads[f"{pref}.lcm.wa.b"] = (
            nm.pointwise_backward(d_a_pre, t, p[f"{pref}.lcm.wa.w"])
        )
        d_t2, grads[f"{pref}.lcm.wv.w"], grads[f"{pref}.lcm.wv.b"] = (
            nm.pointwise_backward(d_v, t, p[f"{pref}.lcm.wv.w"])
        )
        d_in, grads[f"{pref}.lcm.ln.g"], grads[f"{pref}.lcm.ln.b"] = (
            nm.layer_norm_backward(d_t + d_t2, cache[f"{pref}.lcm.in"],
                                   p[f"{pref}.lcm.ln.g"], axis=1)
        )
        dX = dX + d_in

    _, grads["embed.w"], grads["embed.b"] = nm.conv2d_masked_backward(
        dX, cache["embed.in"], p["embed.w"], strict
    )
    return grads


# ---------------------------------------------------------------------------
# logistic mixture likelihood

def _edge_cdf(z, is_edge_lo, is_edge_hi):
    cdf = nm.sigmoid(z)
    cdf = np.where(is_edge_lo, 0.0, cdf)
    cdf = np.where(is_edge_hi, 1.0, cdf)
    return cdf


def lmm_bits(params, targets, b, v_min=-1.0, v_max=1.0, want_grad=False):
    """Codelength of integer targets under per-pixel logistic mixtures.

    params: [B, Cin, K, 3, H, W] raw head outputs (logit, mean, raw scale);
    targets: [B, Cin, H, W] integers.  Returns (per-subpixel bits map
    [B, Cin, H, W], dparams or None).  Lowest/highest bins take open tails.
    """
    logits = params[:, :, :, 0]
    mu = params[:, :, :, 1]
    rho = params[:, :, :, 2]
    s = nm.softplus(rho) + SCALE_FLOOR
    h = half_bin(b, v_min, v_max)
    xt = normalize(targets, b, v_min, v_max, dtype=params.dtype)[:, :, None]
    lo = (targets == 0)[:, :, None]
    hi = (targets == 2**b - 1)[:, :, None]
    z_hi = (xt + h - mu) / s
    z_lo = (xt - h - mu) / s
    cdf_hi = _edge_cdf(z_hi, False, hi)
    cdf_lo = _edge_cdf(z_lo, lo, False)
    pk = cdf_hi - cdf_lo
    pi = nm.softmax(logits, axis=2)
    prob = (pi * pk).sum(axis=2)
    floored = prob < PROB_FLOOR
    prob = np.maximum(prob, PROB_FLOOR)
    bits = -np.log2(prob)
    if not want_grad:
        return bits, None

    dprob = np.where(floored, 0.0, -1.0 / (prob * np.log(2.0)))[:, :, None]
    d_pi = dprob * pk
    d_logits = pi * (d_pi - (d_pi * pi).sum(axis=2, keepdims=True))
    pdf_hi = np.where(hi, 0.0, cdf_hi * (1.0 - cdf_hi))
    pdf_lo = np.where(lo, 0.0, cdf_lo * (1.0 - cdf_lo))
    d_mu = dprob * pi * (pdf_lo - pdf_hi) / s
    zp_hi = np.where(hi, 0.0, z_hi * cdf_hi * (1.0 - cdf_hi))
    zp_lo = np.where(lo, 0.0, z_lo * cdf_lo * (1.0 - cdf_lo))
    d_s = dprob * pi * (zp_lo - zp_hi) / s
    d_rho = d_s * nm.sigmoid(rho)
    dparams = np.stack([d_logits, d_mu, d_rho], axis=3)
    return bits, dparams


def nll(weights: ModelWeights, image, valid=None):
    """Total bits and per-pixel bits map for an integer image [Cin, H, W].

    `valid` is an optional [H, W] bool mask of real (non-padded) pixels.
    The image must already be padded to patch multiples.
    """
    cfg = weights.config
    x = normalize(image, cfg.bit_depth, cfg.v_min, cfg.v_max, dtype=weights.dtype)
    params = forward(weights, x[None])
    bits, _ = lmm_bits(params, image[None], cfg.bit_depth, cfg.v_min, cfg.v_max)
    bits = bits[0].sum(axis=0)  # over image channels -> [H, W]
    if valid is not None:
        bits = bits * valid
    return float(bits.sum()), bits


# ---------------------------------------------------------------------------
# weight file I/O

_CFG_FIELDS = (
    "depth", "channels", "mlp_ratio", "embed_kernel", "block_kernel",
    "spm_kernel", "mixtures", "patch", "delta", "bit_depth", "channels_in",
    "v_min", "v_max",
)


def save_weights(path, weights: ModelWeights):
    cfg = weights.config
    blob = weights.flat_blob()
    digest = hashlib.sha256(blob).digest()
    rec = struct.pack(
        "<13i", *(int(getattr(cfg, f)) for f in _CFG_FIELDS)
    )
    with open(path, "wb") as f:
        f.write(_WEIGHTS_MAGIC)
        f.write(rec)
        f.write(digest[:8])
        f.write(blob)


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _WEIGHTS_MAGIC:
        raise ValueError("not a weight file")
    vals = struct.unpack("<13i", data[4:4 + 52])
    kw = dict(zip(_CFG_FIELDS, vals))
    kw["v_min"] = float(kw["v_min"])
    kw["v_max"] = float(kw["v_max"])
    cfg = ModelConfig(**kw)
    stored_hash = struct.unpack("<Q", data[56:64])[0]
    blob = data[64:]
    ref = init_weights(cfg, np.random.default_rng(0))
    params = {}
    off = 0
    for name in param_names(cfg):
        shape = ref.params[name].shape
        n = int(np.prod(shape))
        params[name] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=off
        ).reshape(shape).copy()
        off += 4 * n
    if off != len(blob):
        raise ValueError("weight blob length mismatch")
    w = ModelWeights(cfg, params)
    if w.content_hash() != stored_hash:
        raise ValueError("weight content hash mismatch")
    return w
