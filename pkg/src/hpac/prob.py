"""Discretized logistic mixtures and adaptive-focus coding windows.

A coding window is a truncated alphabet of nominal size R centered on the
mixture mean, quantized to a 16-bit-exact PMF with one trailing sentinel
entry whose mass is the truncated tail.  Window cost is O(R) regardless
of the bit depth, which is the whole point: a 16-bit alphabet never
materializes a 65536-entry table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .model import SCALE_FLOOR, denormalize, half_bin, normalize

PMF_TOTAL = 1 << 16

# high-water mark of constructed table sizes, for memory-bound checks
peak_table_entries = 0


def reset_peak_table_entries():
    global peak_table_entries
    peak_table_entries = 0


@dataclass(frozen=True)
class MixtureParams:
    logits: np.ndarray
    means: np.ndarray  # normalized units
    scales: np.ndarray  # normalized units, >= SCALE_FLOOR

    @classmethod
    def from_raw(cls, raw):
        """raw: [K, 3] head outputs (logit, mean, raw scale)."""
        raw = np.asarray(raw, dtype=np.float64)
        return cls(
            logits=raw[:, 0],
            means=raw[:, 1],
            scales=nm.softplus(raw[:, 2]) + SCALE_FLOOR,
        )


def bin_prob(params: MixtureParams, x, b, v_min=-1.0, v_max=1.0):
    """PMF of integer value(s) x in [0, 2^b - 1]; open tails at the ends."""
    x = np.asarray(x)
    xt = normalize(x, b, v_min, v_max, dtype=np.float64)
    h = half_bin(b, v_min, v_max)
    mu = params.means[:, None]
    s = params.scales[:, None]
    z_hi = (xt.reshape(-1)[None, :] + h - mu) / s
    z_lo = (xt.reshape(-1)[None, :] - h - mu) / s
    cdf_hi = np.where(x.reshape(-1)[None, :] == 2**b - 1, 1.0, nm.sigmoid(z_hi))
    cdf_lo = np.where(x.reshape(-1)[None, :] == 0, 0.0, nm.sigmoid(z_lo))
    pi = nm.softmax(params.logits)
    out = (pi[:, None] * (cdf_hi - cdf_lo)).sum(axis=0)
    return out.reshape(x.shape) if x.ndim else float(out[0])


def afc_center(params: MixtureParams, b, v_min=-1.0, v_max=1.0):
    """Mixture mean in pixel units."""
    pi = nm.softmax(params.logits)
    return float(denormalize((pi * params.means).sum(), b, v_min, v_max))


def _iround(x):
    return int(np.floor(x + 0.5))


def quantize_pmf(probs, total=PMF_TOTAL):
    """Deterministic largest-remainder rounding to positive ints summing to total."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.size
    if n > total:
        raise ValueError("more entries than the quantization total")
    probs = probs / probs.sum()
    raw = probs * total
    base = np.maximum(np.floor(raw).astype(np.int64), 1)
    rem = raw - np.floor(raw)
    diff = int(total - base.sum())
    if diff > 0:
        order = np.lexsort((np.arange(n), -rem))
        # every entry may receive several increments when n is tiny
        q, r = divmod(diff, n)
        base += q
        base[order[:r]] += 1
    elif diff < 0:
        order = np.lexsort((np.arange(n), rem))
        while diff < 0:
            for i in order:
                if base[i] > 1:
                    base[i] -= 1
                    diff += 1
                    if diff == 0:
                        break
    assert base.sum() == total and (base >= 1).all()
    return base


@dataclass(frozen=True)
class CodingWindow:
    x_lo: int
    x_hi: int  # inclusive
    R: int
    table: np.ndarray  # n_in + 1 positive ints summing to 2**16; sentinel last
    escape_mass: float

    @property
    def n_in(self):
        return self.x_hi - self.x_lo + 1

    @property
    def sentinel(self):
        return self.n_in

    def cdf(self):
        c = np.zeros(self.table.size + 1, dtype=np.int64)
        np.cumsum(self.table, out=c[1:])
        return c


def afc_window(params: MixtureParams, R, b, v_min=-1.0, v_max=1.0) -> CodingWindow:
    """Truncated, renormalized PMF window around the predicted center."""
    if R < 2:
        raise ValueError("R must be >= 2")
    center = min(max(afc_center(params, b, v_min, v_max), 0.0), float(2**b - 1))
    x_lo = max(0, _iround(center - R / 2))
    x_hi = min(2**b - 1, _iround(center + R / 2))
    xs = np.arange(x_lo, x_hi + 1)
    p_in = bin_prob(params, xs, b, v_min, v_max)
    esc = max(1.0 - float(p_in.sum()), 1.0 / PMF_TOTAL)
    vec = np.append(p_in, esc)
    table = quantize_pmf(vec)
    global peak_table_entries
    peak_table_entries = max(peak_table_entries, table.size)
    return CodingWindow(x_lo=x_lo, x_hi=x_hi, R=R, table=table, escape_mass=esc)


def escape_map(s, n_in):
    """Bijection from out-of-window local indices to nonnegative residuals."""
    if 0 <= s < n_in:
        raise ValueError("in-window index has no escape residual")
    return 2 * (s - n_in) if s >= n_in else -2 * s - 1


def escape_unmap(s_res, n_in):
    if s_res < 0:
        raise ValueError("residual must be nonnegative")
    if s_res % 2 == 0:
        return n_in + s_res // 2
    return -(s_res + 1) // 2
