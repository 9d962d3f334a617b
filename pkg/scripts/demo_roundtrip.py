#!/usr/bin/env python3
"""Minimal end-to-end demo: train briefly, encode, decode, verify.

Writes the model, a test image, and its compressed container into a
working directory, then reads everything back and checks losslessness.
"""

import argparse
from pathlib import Path

import numpy as np

from hpac import codec, corpus, model, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("workdir", nargs="?", default="demo_out")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.workdir)
    out.mkdir(parents=True, exist_ok=True)

    weights = model.init_weights(model.tiny_config(),
                                 np.random.default_rng(args.seed))
    images = corpus.make_corpus(args.seed + 1, 8, (64, 64))
    tcfg = train.TrainConfig(steps=args.steps, batch=4, crop=32,
                             lr_peak=2e-3, warmup=args.steps // 5,
                             seed=args.seed, log_every=max(args.steps // 4, 1))
    train.train(weights, tcfg, images,
                log=lambda e: print(f"step {e['step']:5d} "
                                    f"loss {e['loss']:.3f} bpsp"))
    model.save_weights(out / "model.hpw", weights)

    img = corpus.gradient_image(np.random.default_rng(args.seed + 9), (80, 60))
    codec.write_pnm(out / "test.pgm", img, maxval=255)

    blob = codec.encode_image(weights, img, window=512)
    (out / "test.hpac").write_bytes(blob)
    decoded = codec.decode_image(model.load_weights(out / "model.hpw"), blob)
    assert np.array_equal(decoded, img), "roundtrip failed"
    codec.write_pnm(out / "decoded.pgm", decoded, maxval=255)

    raw = img.size  # one byte per 8-bit sample
    print(f"\nlossless: True")
    print(f"raw {raw} B -> container {len(blob)} B "
          f"({codec.bpsp(blob, img.shape):.3f} bpsp, "
          f"{raw / len(blob):.2f}x vs uncompressed)")
    print(f"artifacts in {out}/")


if __name__ == "__main__":
    main()
