"""Per-image adapter fine-tuning guided by a saliency rate map.

The idea: fit the low-rank adapters to one image before encoding it, but
spend most optimization steps on the patches the base model predicts
worst.  A single parallel forward yields a per-patch codelength map; an
integral image makes max-sum rectangle queries O(1); a smoothstep
schedule grows the trained rectangle from a fraction of the patch grid
to the whole image over the run.  The objective is two-part MDL: image
bits (with straight-through quantized adapters) plus adapter bits under
the logistic prior (with uniform-noise relaxation), per subpixel.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adapt, model
from . import numerics as nm


# ---------------------------------------------------------------------------
# rate map and region search

def rate_map(weights: model.ModelWeights, image, valid=None):
    """Per-patch codelength [gh, gw] from one parallel forward.

    Only real (valid) pixels contribute; fully padded patches get zero.
    """
    P = weights.config.patch
    _, bits = model.nll(weights, image, valid=valid)
    H, W = bits.shape
    return bits.reshape(H // P, P, W // P, P).sum(axis=(1, 3)).astype(np.float64)


def integral_image(m):
    """ii[i, j] = sum of m[:i, :j]; shape (gh + 1, gw + 1)."""
    m = np.asarray(m, dtype=np.float64)
    ii = np.zeros((m.shape[0] + 1, m.shape[1] + 1))
    ii[1:, 1:] = m.cumsum(axis=0).cumsum(axis=1)
    return ii


def find_region(rate, h, w):
    """Top-left (i, j) of the max-sum h x w rectangle; first (row-major) on ties."""
    gh, gw = rate.shape
    if not (1 <= h <= gh and 1 <= w <= gw):
        raise ValueError("region does not fit the patch grid")
    ii = integral_image(rate)
    sums = (ii[h:, w:] - ii[h:, : gw - w + 1]
            - ii[: gh - h + 1, w:] + ii[: gh - h + 1, : gw - w + 1])
    i, j = np.unravel_index(int(np.argmax(sums)), sums.shape)
    return int(i), int(j)


def schedule_alpha(t, steps, floor=0.2, tail=0.1, expo=1.0):
    """Smoothstep area fraction: floor at t=0, 1 for the last `tail` of the run."""
    tp = min(max(t / (steps * (1.0 - tail)), 0.0), 1.0)
    s = tp * tp * (3.0 - 2.0 * tp)
    return floor + (1.0 - floor) * s ** expo


def target_shape(alpha, gh, gw):
    """Rectangle of ~alpha * grid area, aspect ratio near the grid's."""
    h = int(round(np.sqrt(alpha * gh * gw * gh / gw)))
    h = min(max(h, 1), gh)
    w = int(round(alpha * gh * gw / h))
    w = min(max(w, 1), gw)
    return h, w


# ---------------------------------------------------------------------------
# fine-tuning loops

@dataclass
class FinetuneResult:
    adapters: adapt.AdapterSet | None
    losses: list = field(default_factory=list)
    regions: list = field(default_factory=list)
    elapsed: float = 0.0


def sarpft_run(weights: model.ModelWeights, image, *, steps=50, rank=8,
               step_w=0.05, s_prior=0.05, lr=1e-2, floor=0.2, tail=0.1,
               expo=1.0, valid=None, rng=None) -> FinetuneResult:
    """Fit adapters to one padded integer image [Cin, H, W]."""
    t0 = time.perf_counter()
    cfg = weights.config
    rng = rng if rng is not None else np.random.default_rng(0)
    P = cfg.patch
    Cin, H, W = image.shape
    if H % P or W % P:
        padded = model.pad_to_patch(image, P, cfg.bit_depth)
        vfull = np.zeros(padded.shape[-2:], dtype=bool)
        vfull[:H, :W] = True if valid is None else valid
        image, valid = padded, vfull
        Cin, H, W = image.shape
    n_total = float(Cin * (int(valid.sum()) if valid is not None else H * W))

    rates = rate_map(weights, image, valid=valid)  # computed once, not refreshed
    gh, gw = rates.shape

    adapters = adapt.init_adapters(cfg, rng, rank=rank, step=step_w,
                                   s_prior=s_prior, dtype=np.float64)
    order = adapt.factor_names(cfg, adapters.rank)
    opt = nm.AdamState(adapters.factors)
    res = FinetuneResult(adapters=None)

    for t in range(steps):
        a = schedule_alpha(t, steps, floor=floor, tail=tail, expo=expo)
        h, w = target_shape(a, gh, gw)
        i, j = find_region(rates, h, w)
        res.regions.append((i, j, h, w))
        sl = np.s_[i * P:(i + h) * P, j * P:(j + w) * P]
        crop = image[:, sl[0], sl[1]]
        vcrop = valid[sl] if valid is not None else None

        # image bits with straight-through quantized adapters
        merged = adapt.merge(weights, adapters, quantized=True)
        x = model.normalize(crop, cfg.bit_depth, cfg.v_min, cfg.v_max,
                            dtype=weights.dtype)
        params, cache = model.forward(merged, x[None], want_cache=True)
        bits_map, dparams = model.lmm_bits(params, crop[None], cfg.bit_depth,
                                           cfg.v_min, cfg.v_max, want_grad=True)
        if vcrop is not None:
            bits_map = bits_map * vcrop
            dparams = dparams * vcrop
        image_bits = float(bits_map.sum())
        wgrads = model.backward(merged, cache, dparams)
        fgrads = adapt.factor_grads(adapters, wgrads)

        # adapter bits with uniform-noise relaxation
        noisy = {k: adapt.noise_sample(adapters.factors[k], adapters.step, rng)
                 for k in order}
        flat = np.concatenate([noisy[k].reshape(-1) for k in order])
        param_bits, pgrad = adapt.param_bits_surrogate(
            flat, adapters.step, adapters.s_prior, want_grad=True)
        res.losses.append((image_bits + param_bits) / n_total)

        grads = {}
        off = 0
        for k in order:
            n = adapters.factors[k].size
            grads[k] = (fgrads[k].astype(np.float64)
                        + pgrad[off:off + n].reshape(fgrads[k].shape)) / n_total
            off += n
        nm.adam_step(adapters.factors, grads, opt, lr=lr)

    res.adapters = adapters
    res.elapsed = time.perf_counter() - t0
    return res


def full_finetune_run(weights: model.ModelWeights, image, *, steps=50,
                      lr=1e-4, valid=None) -> tuple[model.ModelWeights, float]:
    """Whole-model, whole-image likelihood fine-tuning (latency baseline)."""
    t0 = time.perf_counter()
    cfg = weights.config
    Cin, H, W = image.shape
    n_total = float(Cin * (int(valid.sum()) if valid is not None else H * W))
    tuned = weights.copy()
    opt = nm.AdamState(tuned.params)
    x = model.normalize(image, cfg.bit_depth, cfg.v_min, cfg.v_max,
                        dtype=weights.dtype)[None]
    for _ in range(steps):
        params, cache = model.forward(tuned, x, want_cache=True)
        _, dparams = model.lmm_bits(params, image[None], cfg.bit_depth,
                                    cfg.v_min, cfg.v_max, want_grad=True)
        if valid is not None:
            dparams = dparams * valid
        grads = model.backward(tuned, cache, dparams)
        nm.adam_step(tuned.params,
                     {k: g / n_total for k, g in grads.items()}, opt, lr=lr)
    return tuned, time.perf_counter() - t0
