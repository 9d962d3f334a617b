"""Group-wise scan orders and causal kernel masks.

A P x P patch is partitioned into groups by s(r, c) = c + r * delta and
coded in ascending s, all pixels of one group in parallel.  Kernel masks
derive from the same rule: a tap at offset (dr, dc) points at a strictly
earlier group iff dr * delta + dc < 0 (strict mask, used for the first
layer so a pixel never conditions on itself) and at a group <= the
current one iff dr * delta + dc <= 0 (permissive mask, later layers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def num_groups(P, delta):
    """Nominal group count for a P x P patch at stride delta."""
    return (1 + delta) * (P - 1) + 1


def group_index(r, c, delta):
    return c + r * delta


@dataclass(frozen=True)
class ScanSpec:
    P: int
    delta: int

    def __post_init__(self):
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    @property
    def num_groups(self):
        return num_groups(self.P, self.delta)


@dataclass(frozen=True)
class GroupSchedule:
    """Non-empty groups in ascending s; the coordinate lists partition the patch.

    For small P and large delta some s values in [0, (1+delta)(P-1)] are
    unoccupied; those are skipped so the coder never runs an empty step.
    """

    spec: ScanSpec
    groups: tuple = field(default=())  # ((s, ((r, c), ...)), ...)

    def __len__(self):
        return len(self.groups)


def build_schedule(spec: ScanSpec) -> GroupSchedule:
    buckets = {}
    for r in range(spec.P):
        for c in range(spec.P):
            buckets.setdefault(group_index(r, c, spec.delta), []).append((r, c))
    groups = tuple(
        (s, tuple(buckets[s])) for s in sorted(buckets)
    )
    return GroupSchedule(spec=spec, groups=groups)


def group_map(spec: ScanSpec) -> np.ndarray:
    """[P, P] array of group indices."""
    r = np.arange(spec.P)[:, None]
    c = np.arange(spec.P)[None, :]
    return c + r * spec.delta


@dataclass(frozen=True)
class MaskKernel:
    k: int
    kind: str  # "strict" | "permissive"
    bits: np.ndarray

    @property
    def n_active(self):
        return int(self.bits.sum())


def build_mask(kind, k, delta) -> MaskKernel:
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    if kind not in ("strict", "permissive"):
        raise ValueError(f"unknown mask kind {kind!r}")
    h = k // 2
    dr = np.arange(-h, h + 1)[:, None]
    dc = np.arange(-h, h + 1)[None, :]
    off = dr * delta + dc
    bits = (off < 0) if kind == "strict" else (off <= 0)
    return MaskKernel(k=k, kind=kind, bits=bits.astype(np.int8))
