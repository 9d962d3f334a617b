#!/usr/bin/env python3
"""Per-image fine-tuning benchmark: guided low-rank adapters vs full FT.

Trains a small base model on one synthetic family, then adapts it to
out-of-distribution images.  Reports total codelength (image bits plus
the coded adapter payload) and wall-clock for both strategies.
"""

import argparse

import numpy as np

from hpac import adapt, corpus, model, sarpft, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--base-steps", type=int, default=300)
    ap.add_argument("--ft-steps", type=int, default=50)
    ap.add_argument("--rank", type=int, default=2)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    weights = model.init_weights(model.tiny_config(),
                                 np.random.default_rng(args.seed))
    images = corpus.make_corpus(args.seed + 1, 8, (64, 64),
                                families=("gradient",))
    tcfg = train.TrainConfig(steps=args.base_steps, batch=4, crop=32,
                             lr_peak=2e-3, warmup=args.base_steps // 5,
                             seed=args.seed,
                             log_every=max(args.base_steps // 3, 1))
    print(f"training base model on gradients, {args.base_steps} steps ...")
    train.train(weights, tcfg, images,
                log=lambda e: print(f"  step {e['step']:5d} "
                                    f"loss {e['loss']:.3f}"))

    rng = np.random.default_rng(args.seed + 50)
    print(f"\n{'img':>3}  {'base':>7}  {'adapted':>7}  {'gain':>6}  "
          f"{'guided s':>8}  {'full s':>7}")
    gains, t_guided, t_full = [], [], []
    for i in range(args.images):
        img = corpus.glyph_image(rng, (args.size, args.size))
        base_bits, _ = model.nll(weights, img)
        res = sarpft.sarpft_run(weights, img, steps=args.ft_steps,
                                rank=args.rank,
                                rng=np.random.default_rng(1000 + i))
        merged = adapt.merge(weights, res.adapters, quantized=True)
        tuned_bits, _ = model.nll(merged, img)
        total = tuned_bits + len(adapt.code_adapters(res.adapters)) * 8
        _, elapsed_full = sarpft.full_finetune_run(weights, img,
                                                   steps=args.ft_steps,
                                                   lr=1e-3)
        gain = (base_bits - total) / img.size
        gains.append(gain)
        t_guided.append(res.elapsed)
        t_full.append(elapsed_full)
        print(f"{i:>3}  {base_bits / img.size:>7.3f}  "
              f"{total / img.size:>7.3f}  {gain:>+6.3f}  "
              f"{res.elapsed:>8.1f}  {elapsed_full:>7.1f}")
    print(f"\nmean gain {np.mean(gains):+.3f} bpsp; guided "
          f"{np.mean(t_guided):.1f}s vs full {np.mean(t_full):.1f}s at "
          f"T={args.ft_steps}")


if __name__ == "__main__":
    main()
