"""Bitstream container plus the full encode/decode paths.

Both directions drive the cache-then-select engine, so the mixture
parameters feeding the range coder are bit-identical on the two sides;
encoding the same image with the same weights twice yields the same
bytes.  Pixels are coded in engine row order within each scan step
(patch-local group member major, patches raster within a member),
channels innermost.  Padded pixels are evaluated but never coded.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapt, model
from .coder import RangeDecoder, RangeEncoder, decode_expgolomb, encode_expgolomb
from .csi import CsiEngine
from .prob import MixtureParams, afc_window, escape_map, escape_unmap

MAGIC = b"HPAC"
VERSION = 1
FLAG_ADAPTERS = 1
FLAG_FAST = 2
_HEADER_FMT = "<4sBBIIBBBBBHQI"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


@dataclass(frozen=True)
class ContainerHeader:
    version: int
    flags: int
    width: int
    height: int
    channels: int
    bit_depth: int
    patch: int
    delta: int
    mixtures: int
    window: int
    model_hash: int
    adapter_len: int


def _is_fast(cfg: model.ModelConfig):
    f = model.fast_config()
    return (cfg.depth, cfg.channels, cfg.mixtures) == (f.depth, f.channels,
                                                       f.mixtures)


def pack_container(header: ContainerHeader, adapter_payload: bytes,
                   image_payload: bytes) -> bytes:
    head = struct.pack(
        _HEADER_FMT, MAGIC, header.version, header.flags, header.width,
        header.height, header.channels, header.bit_depth, header.patch,
        header.delta, header.mixtures, header.window, header.model_hash,
        len(adapter_payload))
    return head + adapter_payload + image_payload


def parse_container(blob: bytes):
    if len(blob) < _HEADER_SIZE:
        raise ValueError("truncated container")
    fields = struct.unpack(_HEADER_FMT, blob[:_HEADER_SIZE])
    if fields[0] != MAGIC:
        raise ValueError("bad container magic")
    header = ContainerHeader(*fields[1:])
    if header.version != VERSION:
        raise ValueError(f"unsupported container version {header.version}")
    off = _HEADER_SIZE
    if len(blob) < off + header.adapter_len:
        raise ValueError("truncated adapter payload")
    adapter_payload = blob[off:off + header.adapter_len]
    return header, adapter_payload, blob[off + header.adapter_len:]


def _check_model(header: ContainerHeader, weights: model.ModelWeights):
    cfg = weights.config
    if header.model_hash != weights.content_hash():
        raise ValueError("container was produced with different model weights")
    if (header.patch, header.delta, header.mixtures) != (
            cfg.patch, cfg.delta, cfg.mixtures):
        raise ValueError("container/model configuration mismatch")
    if header.bit_depth != cfg.bit_depth or header.channels != cfg.channels_in:
        raise ValueError("container/model image format mismatch")


def encode_image(weights: model.ModelWeights, image, *, window=1024,
                 adapters: adapt.AdapterSet | None = None) -> bytes:
    """image: integer [Cin, H, W] in [0, 2^b - 1]."""
    cfg = weights.config
    image = np.asarray(image)
    Cin, H, W = image.shape
    if Cin != cfg.channels_in:
        raise ValueError("channel count mismatch")
    b = cfg.bit_depth
    adapter_payload = b""
    coding = weights
    flags = FLAG_FAST if _is_fast(cfg) else 0
    if adapters is not None:
        adapter_payload = adapt.code_adapters(adapters)
        # decode our own payload so both sides run the identical merge
        coding = adapt.merge(weights,
                             adapt.decode_adapters(adapter_payload, cfg))
        flags |= FLAG_ADAPTERS

    padded = model.pad_to_patch(image, cfg.patch, b)
    Hp, Wp = padded.shape[-2:]
    eng = CsiEngine(coding, Hp, Wp)
    eng.prefill_image(model.normalize(padded, b, cfg.v_min, cfg.v_max,
                                      dtype=coding.dtype))
    enc = RangeEncoder()
    for i in range(eng.num_steps):
        raw = eng.step(i)
        pos = eng._steps[i]["pos"]
        for n in range(pos.shape[0]):
            r, c = int(pos[n, 0]), int(pos[n, 1])
            if r >= H or c >= W:
                continue  # padding: evaluated, never coded
            for ch in range(Cin):
                win = afc_window(MixtureParams.from_raw(raw[n, ch]), window,
                                 b, cfg.v_min, cfg.v_max)
                local = int(image[ch, r, c]) - win.x_lo
                cdf = win.cdf()
                if 0 <= local < win.n_in:
                    enc.encode_symbol(local, cdf)
                else:
                    enc.encode_symbol(win.sentinel, cdf)
                    encode_expgolomb(enc, escape_map(local, win.n_in))
    header = ContainerHeader(
        version=VERSION, flags=flags, width=W, height=H, channels=Cin,
        bit_depth=b, patch=cfg.patch, delta=cfg.delta, mixtures=cfg.mixtures,
        window=window, model_hash=weights.content_hash(),
        adapter_len=len(adapter_payload))
    return pack_container(header, adapter_payload, enc.finish())


def decode_image(weights: model.ModelWeights, blob: bytes) -> np.ndarray:
    header, adapter_payload, image_payload = parse_container(blob)
    _check_model(header, weights)
    cfg = weights.config
    b = cfg.bit_depth
    coding = weights
    if header.flags & FLAG_ADAPTERS:
        coding = adapt.merge(weights,
                             adapt.decode_adapters(adapter_payload, cfg))
    elif header.adapter_len:
        raise ValueError("adapter payload present but flag not set")

    H, W, Cin = header.height, header.width, header.channels
    P = cfg.patch
    Hp, Wp = -(-H // P) * P, -(-W // P) * P
    eng = CsiEngine(coding, Hp, Wp)
    dec = RangeDecoder(image_payload)
    image = np.zeros((Cin, H, W), dtype=np.int64)
    pad = model.pad_value(b)
    for i in range(eng.num_steps):
        raw = eng.step(i)
        pos = eng._steps[i]["pos"]
        vals = np.full((pos.shape[0], Cin), pad, dtype=np.int64)
        for n in range(pos.shape[0]):
            r, c = int(pos[n, 0]), int(pos[n, 1])
            if r >= H or c >= W:
                continue
            for ch in range(Cin):
                win = afc_window(MixtureParams.from_raw(raw[n, ch]),
                                 header.window, b, cfg.v_min, cfg.v_max)
                sym = dec.decode_symbol(win.cdf())
                if sym == win.sentinel:
                    sym = escape_unmap(decode_expgolomb(dec), win.n_in)
                v = sym + win.x_lo
                if not 0 <= v <= 2**b - 1:
                    raise ValueError("decoded value out of range (corrupt stream)")
                vals[n, ch] = v
                image[ch, r, c] = v
        eng.write_pixels(i, model.normalize(vals, b, cfg.v_min, cfg.v_max,
                                            dtype=coding.dtype))
    return image


def bpsp(blob: bytes, image_shape) -> float:
    return 8.0 * len(blob) / int(np.prod(image_shape))


# ---------------------------------------------------------------------------
# image file I/O: binary PNM (P5/P6) and raw 16-bit with a JSON sidecar

def _read_pnm_header(f):
    tokens = []
    while len(tokens) < 4:
        line = f.readline()
        if not line:
            raise ValueError("truncated PNM header")
        text = line.split(b"#", 1)[0]
        tokens += text.split()
    return tokens[:4]


def read_pnm(path):
    """Binary PGM/PPM -> ([C, H, W] int array, maxval)."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic in (b"P2", b"P3"):
            raise ValueError("ASCII PNM is not supported; use P5/P6")
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"not a binary PNM file: {magic!r}")
        w, h, maxval = int(w), int(h), int(maxval)
        channels = 3 if magic == b"P6" else 1
        dtype = ">u2" if maxval > 255 else np.uint8
        data = np.frombuffer(f.read(), dtype=dtype, count=h * w * channels)
    return data.reshape(h, w, channels).transpose(2, 0, 1).astype(np.int64), maxval


def write_pnm(path, image, maxval=None):
    image = np.asarray(image)
    C, H, W = image.shape
    if C not in (1, 3):
        raise ValueError("PNM supports 1 or 3 channels")
    if maxval is None:
        maxval = 255 if image.max() <= 255 else 65535
    magic = b"P5" if C == 1 else b"P6"
    dtype = ">u2" if maxval > 255 else np.uint8
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (W, H, maxval))
        f.write(np.ascontiguousarray(
            image.transpose(1, 2, 0).astype(dtype)).tobytes())


def read_raw16(path):
    """Big-endian u16 samples plus a {path}.json sidecar with the dims."""
    meta = json.loads(Path(str(path) + ".json").read_text())
    c, h, w = meta["channels"], meta["height"], meta["width"]
    data = np.fromfile(path, dtype=">u2", count=c * h * w)
    return data.reshape(c, h, w).astype(np.int64), meta.get("bit_depth", 16)


def write_raw16(path, image, bit_depth=16):
    image = np.asarray(image)
    c, h, w = image.shape
    image.astype(">u2").tofile(path)
    Path(str(path) + ".json").write_text(json.dumps(
        {"channels": c, "height": h, "width": w, "bit_depth": bit_depth}))


def read_image(path):
    """Returns ([C, H, W] int array, bit depth) based on the file suffix."""
    path = Path(path)
    if path.suffix in (".pgm", ".ppm", ".pnm"):
        img, maxval = read_pnm(path)
        return img, int(maxval).bit_length()
    if path.suffix == ".raw":
        return read_raw16(path)
    raise ValueError(f"unsupported image format: {path.suffix}")


def write_image(path, image, bit_depth):
    path = Path(path)
    if path.suffix in (".pgm", ".ppm", ".pnm"):
        write_pnm(path, image, maxval=2**bit_depth - 1)
    elif path.suffix == ".raw":
        write_raw16(path, image, bit_depth=bit_depth)
    else:
        raise ValueError(f"unsupported image format: {path.suffix}")
