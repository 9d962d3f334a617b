"""Training loop: Adam with linear warmup into a cosine decay.

The model trains on random crops (multiples of the patch size) from a
sampler callback, minimizing mean bits per subpixel.  Held-out images
are scored with full-image codelengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from . import numerics as nm


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    crop: int = 32  # must be a multiple of the model patch size
    lr_peak: float = 1e-3
    warmup: int = 500
    seed: int = 0
    log_every: int = 100


def lr_schedule(t, cfg: TrainConfig):
    """Linear warmup to lr_peak, then cosine decay to zero."""
    if t < cfg.warmup:
        return cfg.lr_peak * (t + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    return cfg.lr_peak * 0.5 * (1.0 + np.cos(np.pi * (t - cfg.warmup) / span))


def random_crop(rng: np.random.Generator, image, crop):
    _, h, w = image.shape
    if h < crop or w < crop:
        raise ValueError("image smaller than the crop size")
    r = int(rng.integers(0, h - crop + 1))
    c = int(rng.integers(0, w - crop + 1))
    return image[:, r:r + crop, c:c + crop]


def eval_bpsp(weights: model.ModelWeights, images):
    """Mean model codelength per subpixel over full (padded) images."""
    total_bits = 0.0
    total_sub = 0
    for img in images:
        padded = model.pad_to_patch(img, weights.config.patch,
                                    weights.config.bit_depth)
        valid = np.zeros(padded.shape[-2:], dtype=bool)
        valid[: img.shape[-2], : img.shape[-1]] = True
        bits, _ = model.nll(weights, padded, valid=valid)
        total_bits += bits
        total_sub += img.size
    return total_bits / total_sub


def train(weights: model.ModelWeights, cfg: TrainConfig, images,
          heldout=None, log=None):
    """Fit `weights` in place; returns a history of (step, loss, lr [, eval])."""
    mcfg = weights.config
    if cfg.crop % mcfg.patch:
        raise ValueError("crop size must be a multiple of the patch size")
    rng = np.random.default_rng(cfg.seed)
    opt = nm.AdamState(weights.params)
    history = []
    for t in range(cfg.steps):
        batch = np.stack([
            random_crop(rng, images[int(rng.integers(0, len(images)))],
                        cfg.crop)
            for _ in range(cfg.batch)
        ])
        x = model.normalize(batch, mcfg.bit_depth, mcfg.v_min, mcfg.v_max,
                            dtype=weights.dtype)
        params, cache = model.forward(weights, x, want_cache=True)
        bits, dparams = model.lmm_bits(params, batch, mcfg.bit_depth,
                                       mcfg.v_min, mcfg.v_max, want_grad=True)
        n = batch.size
        loss = float(bits.sum()) / n
        lr = lr_schedule(t, cfg)
        grads = model.backward(weights, cache, dparams)
        nm.adam_step(weights.params, {k: g / n for k, g in grads.items()},
                     opt, lr=lr)
        if t % cfg.log_every == 0 or t == cfg.steps - 1:
            entry = {"step": t, "loss": loss, "lr": lr}
            if heldout is not None:
                entry["heldout_bpsp"] = eval_bpsp(weights, heldout)
            history.append(entry)
            if log is not None:
                log(entry)
    return history
