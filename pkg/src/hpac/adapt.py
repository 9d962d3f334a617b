"""Low-rank incremental weights, mixed quantization and adapter coding.

Linear sites get a rank-r product A @ B; depthwise kernel sites get a CP
update sum_t A[:, t] C[:, t] D[:, t] (an identity-core decomposition with
kernel-side rank min(r, k)).  Second factors start at zero so a fresh
adapter set leaves the base model bit-identical.  Quantized adapters are
entropy-coded against a static zero-mean logistic prior with an escape to
Exp-Golomb for out-of-table indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .coder import RangeDecoder, RangeEncoder, decode_expgolomb, encode_expgolomb
from .model import ModelConfig, ModelWeights
from .prob import PMF_TOTAL, escape_map, escape_unmap, quantize_pmf

SITE_LIST_VERSION = 1
PRIOR_TABLE_HALF = 64  # indices [-64, 64] in the coded table; rest escape


def adapter_sites(config: ModelConfig):
    """(weight name, kind) pairs in fixed payload order."""
    sites = []
    for i in range(config.depth):
        p = f"b{i}"
        sites += [
            (f"{p}.lcm.wa.w", "linear"),
            (f"{p}.lcm.wv.w", "linear"),
            (f"{p}.lcm.dw.w", "depthwise"),
            (f"{p}.mlp.up.w", "linear"),
            (f"{p}.spm.wa.w", "linear"),
            (f"{p}.spm.wv.w", "linear"),
            (f"{p}.spm.dw.w", "depthwise"),
        ]
    return sites


def _factor_shapes(config: ModelConfig, site, kind, rank):
    C = config.channels
    if kind == "linear":
        if ".mlp.up." in site:
            m, n = C * config.mlp_ratio, C
        else:
            m, n = C, C
        return {"A": (m, rank), "B": (rank, n)}
    k = config.block_kernel if ".lcm." in site else config.spm_kernel
    rp = min(rank, k)
    return {"A": (C, rp), "C": (k, rp), "D": (k, rp)}


def factor_names(config: ModelConfig, rank):
    names = []
    for site, kind in adapter_sites(config):
        for f in _factor_shapes(config, site, kind, rank):
            names.append(f"{site}:{f}")
    return names


@dataclass
class AdapterSet:
    """Quantizable low-rank increments over the adapted weight sites."""

    config: ModelConfig
    rank: int
    step: float  # quantization step width
    s_prior: float  # logistic prior scale
    factors: dict  # "site:F" -> array

    def copy(self):
        return AdapterSet(self.config, self.rank, self.step, self.s_prior,
                          {k: v.copy() for k, v in self.factors.items()})

    def n_values(self):
        return sum(v.size for v in self.factors.values())

    def flat_values(self):
        order = factor_names(self.config, self.rank)
        return np.concatenate([self.factors[k].reshape(-1) for k in order])


def init_adapters(config: ModelConfig, rng: np.random.Generator, rank=8,
                  step=0.05, s_prior=0.05, dtype=np.float32) -> AdapterSet:
    # float32-exact step/scale so encoder and decoder agree bit for bit
    step = float(np.float32(step))
    s_prior = float(np.float32(s_prior))
    factors = {}
    for site, kind in adapter_sites(config):
        shapes = _factor_shapes(config, site, kind, rank)
        for fname, shape in shapes.items():
            if fname in ("B", "D"):
                factors[f"{site}:{fname}"] = np.zeros(shape, dtype=dtype)
            else:
                factors[f"{site}:{fname}"] = rng.uniform(
                    -0.1, 0.1, size=shape).astype(dtype)
    return AdapterSet(config, rank, step, s_prior, factors)


def quantize_ste(phi, step):
    """Nearest-multiple quantization; callers treat the gradient as identity."""
    if step <= 0:
        raise ValueError("quantization step must be positive")
    return np.rint(phi / step) * step


def noise_sample(phi, step, rng: np.random.Generator):
    return phi + rng.uniform(-step / 2, step / 2, size=phi.shape).astype(phi.dtype)


def delta_linear(A, B):
    return A @ B


def delta_depthwise(A, C, D):
    """CP expansion to a [m, 1, k, k] depthwise kernel update."""
    dw = np.einsum("mt,it,jt->mij", A, C, D, optimize=True)
    return dw[:, None]


def site_deltas(adapters: AdapterSet, quantized=True):
    """Weight-shaped increments per site, from (optionally STE-quantized) factors."""
    f = adapters.factors
    if quantized:
        f = {k: quantize_ste(v, adapters.step) for k, v in f.items()}
    out = {}
    for site, kind in adapter_sites(adapters.config):
        if kind == "linear":
            out[site] = delta_linear(f[f"{site}:A"], f[f"{site}:B"])
        else:
            out[site] = delta_depthwise(f[f"{site}:A"], f[f"{site}:C"],
                                        f[f"{site}:D"])
    return out


def merge(weights: ModelWeights, adapters: AdapterSet,
          quantized=True) -> ModelWeights:
    """Base + increments; masked sites keep their mask applied at use."""
    if adapters.config != weights.config:
        raise ValueError("adapter/model config mismatch")
    merged = weights.copy()
    for site, delta in site_deltas(adapters, quantized=quantized).items():
        merged.params[site] = (
            weights.params[site] + delta.astype(weights.dtype))
    return merged


def factor_grads(adapters: AdapterSet, weight_grads: dict) -> dict:
    """Chain weight-space grads to factor grads at the STE-quantized point."""
    f = {k: quantize_ste(v, adapters.step) for k, v in adapters.factors.items()}
    grads = {}
    for site, kind in adapter_sites(adapters.config):
        dW = weight_grads[site]
        if kind == "linear":
            grads[f"{site}:A"] = dW @ f[f"{site}:B"].T
            grads[f"{site}:B"] = f[f"{site}:A"].T @ dW
        else:
            g = dW[:, 0]  # [m, k, k]
            A, C, D = f[f"{site}:A"], f[f"{site}:C"], f[f"{site}:D"]
            grads[f"{site}:A"] = np.einsum("mij,it,jt->mt", g, C, D, optimize=True)
            grads[f"{site}:C"] = np.einsum("mij,mt,jt->it", g, A, D, optimize=True)
            grads[f"{site}:D"] = np.einsum("mij,mt,it->jt", g, A, C, optimize=True)
    return grads


# ---------------------------------------------------------------------------
# parameter rate model (static zero-mean logistic prior)

def _logistic_cdf(z):
    return nm.sigmoid(np.asarray(z, dtype=np.float64))


def param_bits_exact(values, step, s_prior):
    """Codelength of the quantized values under the prior, 2^-16 floor."""
    q = np.rint(np.asarray(values, dtype=np.float64) / step)
    p = (_logistic_cdf((q * step + step / 2) / s_prior)
         - _logistic_cdf((q * step - step / 2) / s_prior))
    p = np.maximum(p, 1.0 / PMF_TOTAL)
    return float(-np.log2(p).sum())


def param_bits_surrogate(values_noisy, step, s_prior, want_grad=False):
    """Differentiable rate estimate: -log2(density * step) at the noisy values."""
    z = np.asarray(values_noisy, dtype=np.float64) / s_prior
    sig = _logistic_cdf(z)
    # logistic log-density: -z - 2 log(1 + e^-z) == log sig + log(1 - sig)
    log_pdf = np.log(sig) + np.log1p(-sig)
    bits = float((-(log_pdf + np.log(step / s_prior)) / np.log(2.0)).sum())
    if not want_grad:
        return bits, None
    grad = -(1.0 - 2.0 * sig) / (s_prior * np.log(2.0))
    return bits, grad


def _prior_cdf_table(step, s_prior):
    q = np.arange(-PRIOR_TABLE_HALF, PRIOR_TABLE_HALF + 1)
    p = (_logistic_cdf((q * step + step / 2) / s_prior)
         - _logistic_cdf((q * step - step / 2) / s_prior))
    esc = max(1.0 - float(p.sum()), 1.0 / PMF_TOTAL)
    table = quantize_pmf(np.append(p, esc))
    cdf = np.zeros(table.size + 1, dtype=np.int64)
    np.cumsum(table, out=cdf[1:])
    return cdf


# ---------------------------------------------------------------------------
# payload coding

def code_adapters(adapters: AdapterSet) -> bytes:
    """Serialize STE-quantized adapters; self-describing (rank, step, prior)."""
    header = struct.pack(
        "<BBff", SITE_LIST_VERSION, adapters.rank,
        np.float32(adapters.step), np.float32(adapters.s_prior))
    cdf = _prior_cdf_table(adapters.step, adapters.s_prior)
    n_in = 2 * PRIOR_TABLE_HALF + 1
    enc = RangeEncoder()
    order = factor_names(adapters.config, adapters.rank)
    for name in order:
        q = np.rint(adapters.factors[name].reshape(-1) / adapters.step)
        for qi in q.astype(np.int64):
            local = int(qi) + PRIOR_TABLE_HALF
            if 0 <= local < n_in:
                enc.encode_symbol(local, cdf)
            else:
                enc.encode_symbol(n_in, cdf)
                encode_expgolomb(enc, escape_map(local, n_in))
    return header + enc.finish()


def decode_adapters(payload: bytes, config: ModelConfig) -> AdapterSet:
    """Inverse of code_adapters; factors come back exactly quantized."""
    version, rank, step, s_prior = struct.unpack("<BBff", payload[:10])
    if version != SITE_LIST_VERSION:
        raise ValueError(f"unsupported adapter payload version {version}")
    step = float(step)
    s_prior = float(s_prior)
    cdf = _prior_cdf_table(step, s_prior)
    n_in = 2 * PRIOR_TABLE_HALF + 1
    dec = RangeDecoder(payload[10:])
    factors = {}
    for site, kind in adapter_sites(config):
        for fname, shape in _factor_shapes(config, site, kind, rank).items():
            n = int(np.prod(shape))
            q = np.empty(n, dtype=np.int64)
            for i in range(n):
                sym = dec.decode_symbol(cdf)
                if sym == n_in:
                    sym = escape_unmap(decode_expgolomb(dec), n_in)
                q[i] = sym - PRIOR_TABLE_HALF
            factors[f"{site}:{fname}"] = (
                (q.astype(np.float64) * step).astype(np.float32).reshape(shape))
    return AdapterSet(config, rank, step, s_prior, factors)
