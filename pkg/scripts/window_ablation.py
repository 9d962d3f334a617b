#!/usr/bin/env python3
"""Sweep the coding window size R and report bpsp.

Trains a small 12-bit model on synthetic textures, then encodes a
heavy-tailed test image at several window sizes.  Larger windows trade
per-pixel table work for fewer escape codes.
"""

import argparse

import numpy as np

from hpac import codec, corpus, model, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--bit-depth", type=int, default=12)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--outlier-frac", type=float, default=0.04)
    ap.add_argument("--windows", default="256,512,1024,2048,4096")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    weights = model.init_weights(model.tiny_config(bit_depth=args.bit_depth),
                                 np.random.default_rng(args.seed))
    images = corpus.make_corpus(args.seed + 1, 8, (64, 64),
                                bit_depth=args.bit_depth,
                                families=("noise", "glyphs"))
    tcfg = train.TrainConfig(steps=args.steps, batch=4, crop=32,
                             lr_peak=2e-3, warmup=args.steps // 5,
                             seed=args.seed, log_every=max(args.steps // 4, 1))
    print(f"training {args.steps} steps at {args.bit_depth}-bit ...")
    train.train(weights, tcfg, images,
                log=lambda e: print(f"  step {e['step']:5d} "
                                    f"loss {e['loss']:.3f}"))

    rng = np.random.default_rng(args.seed + 99)
    test = corpus.synth_image(rng, "noise", (args.size, args.size),
                              bit_depth=args.bit_depth)
    mask = rng.random(test.shape) < args.outlier_frac
    test[mask] = rng.integers(0, 2**args.bit_depth, size=int(mask.sum()))
    print(f"test image {test.shape}, {int(mask.sum())} injected outliers")

    print(f"{'R':>6}  {'bpsp':>8}  {'bytes':>8}")
    for window in (int(w) for w in args.windows.split(",")):
        blob = codec.encode_image(weights, test, window=window)
        print(f"{window:>6}  {codec.bpsp(blob, test.shape):>8.4f}  "
              f"{len(blob):>8}")


if __name__ == "__main__":
    main()
