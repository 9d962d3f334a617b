"""Command-line entry points: weights management, training, coding."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import adapt, codec, corpus, model, sarpft, train


def _profile_config(args):
    maker = {"default": model.default_config, "fast": model.fast_config,
             "tiny": model.tiny_config}[args.profile]
    return maker(bit_depth=args.bit_depth, channels_in=args.channels)


def _add_finetune_args(p):
    p.add_argument("--finetune", action="store_true",
                   help="fit per-image adapters before encoding")
    p.add_argument("--ft-steps", type=int, default=50)
    p.add_argument("--ft-rank", type=int, default=8)
    p.add_argument("--ft-lr", type=float, default=1e-2)
    p.add_argument("--ft-seed", type=int, default=0)


def _finetune(weights, image, args):
    padded = model.pad_to_patch(image, weights.config.patch,
                                weights.config.bit_depth)
    valid = np.zeros(padded.shape[-2:], dtype=bool)
    valid[: image.shape[-2], : image.shape[-1]] = True
    res = sarpft.sarpft_run(
        weights, padded, steps=args.ft_steps, rank=args.ft_rank,
        lr=args.ft_lr, valid=valid, rng=np.random.default_rng(args.ft_seed))
    return res.adapters


def _load_for_image(args):
    weights = model.load_weights(args.weights)
    image, depth = codec.read_image(args.input)
    cfg = weights.config
    if depth != cfg.bit_depth:
        # PNM maxval only bounds the depth; trust the model's declared depth
        if image.max() > 2**cfg.bit_depth - 1:
            raise SystemExit(
                f"image needs {depth} bits, model expects {cfg.bit_depth}")
    if image.shape[0] != cfg.channels_in:
        raise SystemExit(
            f"image has {image.shape[0]} channels, model expects "
            f"{cfg.channels_in}")
    return weights, image


def cmd_init_weights(args):
    cfg = _profile_config(args)
    weights = model.init_weights(cfg, np.random.default_rng(args.seed))
    model.save_weights(args.out, weights)
    print(f"wrote {args.out}: {weights.param_count()} params, "
          f"hash {weights.content_hash():016x}")


def cmd_train(args):
    weights = model.load_weights(args.weights)
    cfg = weights.config
    images = corpus.make_corpus(args.corpus_seed, args.images,
                                (args.image_size, args.image_size),
                                bit_depth=cfg.bit_depth,
                                channels=cfg.channels_in,
                                families=tuple(args.families.split(",")))
    heldout = corpus.make_corpus(args.corpus_seed + 1, 4,
                                 (args.image_size, args.image_size),
                                 bit_depth=cfg.bit_depth,
                                 channels=cfg.channels_in,
                                 families=tuple(args.families.split(",")))
    tcfg = train.TrainConfig(steps=args.steps, batch=args.batch,
                             crop=args.crop, lr_peak=args.lr,
                             warmup=args.warmup, seed=args.seed)
    train.train(weights, tcfg, images, heldout=heldout,
                log=lambda e: print(
                    f"step {e['step']:6d} loss {e['loss']:.4f} "
                    f"lr {e['lr']:.2e} heldout {e['heldout_bpsp']:.4f} bpsp"))
    out = args.out or args.weights
    model.save_weights(out, weights)
    print(f"wrote {out}")


def cmd_encode(args):
    weights, image = _load_for_image(args)
    adapters = _finetune(weights, image, args) if args.finetune else None
    t0 = time.perf_counter()
    blob = codec.encode_image(weights, image, window=args.window,
                              adapters=adapters)
    with open(args.output, "wb") as f:
        f.write(blob)
    print(f"{args.input}: {image.shape} -> {len(blob)} bytes "
          f"({codec.bpsp(blob, image.shape):.4f} bpsp, "
          f"{time.perf_counter() - t0:.2f}s)")


def cmd_decode(args):
    weights = model.load_weights(args.weights)
    with open(args.input, "rb") as f:
        blob = f.read()
    image = codec.decode_image(weights, blob)
    codec.write_image(args.output, image, weights.config.bit_depth)
    print(f"wrote {args.output}: {image.shape}")


def cmd_verify(args):
    weights, image = _load_for_image(args)
    adapters = _finetune(weights, image, args) if args.finetune else None
    blob = codec.encode_image(weights, image, window=args.window,
                              adapters=adapters)
    decoded = codec.decode_image(weights, blob)
    ok = np.array_equal(image, decoded)
    print(f"{args.input}: {codec.bpsp(blob, image.shape):.4f} bpsp, "
          f"lossless={ok}")
    if not ok:
        raise SystemExit("verification FAILED: decoded image differs")


def cmd_sweep(args):
    weights, image = _load_for_image(args)
    for window in (int(w) for w in args.windows.split(",")):
        t0 = time.perf_counter()
        blob = codec.encode_image(weights, image, window=window)
        print(f"R={window:5d}  {codec.bpsp(blob, image.shape):.4f} bpsp  "
              f"{time.perf_counter() - t0:.2f}s")


def build_parser():
    p = argparse.ArgumentParser(
        prog="hpac",
        description="lossless image codec with a learned hierarchical "
                    "autoregressive model")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("init-weights", help="write randomly initialized weights")
    q.add_argument("out")
    q.add_argument("--profile", choices=("default", "fast", "tiny"),
                   default="default")
    q.add_argument("--bit-depth", type=int, default=8)
    q.add_argument("--channels", type=int, default=1)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_init_weights)

    q = sub.add_parser("train", help="train weights on a synthetic corpus")
    q.add_argument("weights")
    q.add_argument("--out", default=None, help="output path (default: in place)")
    q.add_argument("--steps", type=int, default=2000)
    q.add_argument("--batch", type=int, default=8)
    q.add_argument("--crop", type=int, default=32)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--warmup", type=int, default=500)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--images", type=int, default=24)
    q.add_argument("--image-size", type=int, default=96)
    q.add_argument("--families", default="gradient,noise,glyphs")
    q.add_argument("--corpus-seed", type=int, default=0)
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("encode", help="compress a PGM/PPM/raw image")
    q.add_argument("weights")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--window", type=int, default=1024)
    _add_finetune_args(q)
    q.set_defaults(fn=cmd_encode)

    q = sub.add_parser("decode", help="decompress to a PGM/PPM/raw image")
    q.add_argument("weights")
    q.add_argument("input")
    q.add_argument("output")
    q.set_defaults(fn=cmd_decode)

    q = sub.add_parser("verify", help="encode + decode in memory and compare")
    q.add_argument("weights")
    q.add_argument("input")
    q.add_argument("--window", type=int, default=1024)
    _add_finetune_args(q)
    q.set_defaults(fn=cmd_verify)

    q = sub.add_parser("sweep", help="bpsp across coding window sizes")
    q.add_argument("weights")
    q.add_argument("input")
    q.add_argument("--windows", default="256,512,1024,2048")
    q.set_defaults(fn=cmd_sweep)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
