"""Lossless image codec built on a hierarchical parallel autoregressive model.

Submodules:
  scan      patch scan order, group schedule, causal conv masks
  numerics  explicit forward/backward kernels, Adam
  model     network definition, likelihood, weight file I/O
  csi       cache-then-select sequential inference engine
  prob      discretized logistic mixtures, focused coding windows
  coder     range coder with an Exp-Golomb bypass
  adapt     low-rank adapters, quantization, adapter payload coding
  sarpft    rate-map-guided per-image fine-tuning
  codec     container format, encode/decode, image file I/O
  corpus    seeded synthetic images
  train     training loop
"""

from .codec import bpsp, decode_image, encode_image
from .model import (ModelConfig, ModelWeights, default_config, fast_config,
                    init_weights, load_weights, save_weights, tiny_config)

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ModelWeights", "default_config", "fast_config",
    "tiny_config", "init_weights", "load_weights", "save_weights",
    "encode_image", "decode_image", "bpsp", "__version__",
]
