"""Seeded synthetic images for training and evaluation.

Three families with different statistics: smooth gradients (easy,
low-entropy), multi-octave value noise (mid-entropy, texture-like), and
two-level glyph blocks (text-like, high-contrast edges).  Everything is
a function of the supplied generator, so corpora are reproducible.
"""

from __future__ import annotations

import numpy as np

FAMILIES = ("gradient", "noise", "glyphs")


def gradient_image(rng: np.random.Generator, size, bit_depth=8, channels=1):
    """Random affine ramps plus a couple of low-frequency sinusoids."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy / max(h, 1)
    xx = xx / max(w, 1)
    out = np.empty((channels, h, w))
    for c in range(channels):
        a, b = rng.uniform(-1.5, 1.5, 2)
        f1, f2 = rng.uniform(1.0, 5.0, 2)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        v = (a * yy + b * xx
             + 0.3 * np.sin(f1 * np.pi * yy + p1)
             + 0.3 * np.sin(f2 * np.pi * xx + p2))
        v = (v - v.min()) / max(np.ptp(v), 1e-9)
        out[c] = v
    return _to_int(out, bit_depth)


def noise_image(rng: np.random.Generator, size, bit_depth=8, channels=1,
                octaves=4):
    """Value noise: bilinearly upsampled random lattices, octave-summed."""
    h, w = size
    out = np.zeros((channels, h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        lat = rng.random((channels, min(cells, h) + 1, min(cells, w) + 1))
        out += amp * _bilinear(lat, h, w)
        total += amp
        amp *= 0.55
    out /= total
    return _to_int(out, bit_depth)


def glyph_image(rng: np.random.Generator, size, bit_depth=8, channels=1):
    """Text-like: dark strokes on a light background (or inverted)."""
    h, w = size
    fg, bg = (0.1, 0.9) if rng.random() < 0.5 else (0.9, 0.1)
    img = np.full((h, w), bg)
    n_strokes = max(4, (h * w) // 64)
    for _ in range(n_strokes):
        r = int(rng.integers(0, h))
        c = int(rng.integers(0, w))
        if rng.random() < 0.5:
            ln = int(rng.integers(2, max(3, w // 4)))
            img[r, c:c + ln] = fg
        else:
            ln = int(rng.integers(2, max(3, h // 4)))
            img[r:r + ln, c] = fg
    img = img + rng.normal(0, 0.01, size=img.shape)
    return _to_int(np.repeat(img[None], channels, axis=0), bit_depth)


def _bilinear(lat, h, w):
    c, lh, lw = lat.shape
    y = np.linspace(0, lh - 1, h)
    x = np.linspace(0, lw - 1, w)
    y0 = np.minimum(y.astype(int), lh - 2)
    x0 = np.minimum(x.astype(int), lw - 2)
    fy = (y - y0)[None, :, None]
    fx = (x - x0)[None, None, :]
    a = lat[:, y0][:, :, x0]
    b = lat[:, y0][:, :, x0 + 1]
    d = lat[:, y0 + 1][:, :, x0]
    e = lat[:, y0 + 1][:, :, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + d * fy * (1 - fx) + e * fy * fx)


def _to_int(v, bit_depth):
    v = np.clip(v, 0.0, 1.0)
    return np.rint(v * (2**bit_depth - 1)).astype(np.int64)


def synth_image(rng: np.random.Generator, family, size, bit_depth=8,
                channels=1):
    fn = {"gradient": gradient_image, "noise": noise_image,
          "glyphs": glyph_image}[family]
    return fn(rng, size, bit_depth=bit_depth, channels=channels)


def make_corpus(seed, n, size, bit_depth=8, channels=1, families=FAMILIES):
    """n seeded images cycling through the requested families."""
    rng = np.random.default_rng(seed)
    return [synth_image(rng, families[i % len(families)], size,
                        bit_depth=bit_depth, channels=channels)
            for i in range(n)]
