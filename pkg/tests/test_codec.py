import numpy as np
import pytest

from hpac import adapt, codec, model, prob, sarpft


def _weights(seed=0, **kw):
    return model.init_weights(model.tiny_config(**kw),
                              np.random.default_rng(seed))


@pytest.mark.parametrize("shape,kw,window", [
    ((1, 1, 1), {}, 512),
    ((1, 16, 16), {}, 512),
    ((1, 37, 23), {}, 512),          # not a patch multiple
    ((3, 20, 20), {"channels_in": 3}, 512),
    ((1, 24, 24), {"bit_depth": 12}, 1024),
])
def test_roundtrip_lossless(shape, kw, window):
    w = _weights(**kw)
    rng = np.random.default_rng(sum(shape))
    img = rng.integers(0, 2**w.config.bit_depth, size=shape)
    blob = codec.encode_image(w, img, window=window)
    np.testing.assert_array_equal(codec.decode_image(w, blob), img)


def test_roundtrip_with_outliers_and_escapes():
    # 16-bit image with a small window: escapes must still be lossless
    w = _weights(3, bit_depth=16)
    rng = np.random.default_rng(4)
    img = rng.normal(32768, 300, size=(1, 18, 22)).astype(np.int64)
    img[0, 3, 4] = 0
    img[0, 10, 1] = 65535
    img = np.clip(img, 0, 65535)
    blob = codec.encode_image(w, img, window=256)
    np.testing.assert_array_equal(codec.decode_image(w, blob), img)


def test_deterministic_bitstreams():
    w = _weights(5)
    rng = np.random.default_rng(6)
    img = rng.integers(0, 256, size=(1, 30, 30))
    a = codec.encode_image(w, img, window=512)
    b = codec.encode_image(w, img, window=512)
    assert a == b


def test_adapter_container_roundtrip(warm_weights):
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, size=(1, 24, 24))
    res = sarpft.sarpft_run(warm_weights, model.pad_to_patch(
        img, warm_weights.config.patch, 8), steps=3, rank=2,
        rng=np.random.default_rng(8))
    blob = codec.encode_image(warm_weights, img, window=512,
                              adapters=res.adapters)
    header, payload, _ = codec.parse_container(blob)
    assert header.flags & codec.FLAG_ADAPTERS
    assert header.adapter_len == len(payload) > 0
    np.testing.assert_array_equal(codec.decode_image(warm_weights, blob), img)


def test_container_header_fields():
    w = _weights(9)
    img = np.zeros((1, 5, 9), dtype=np.int64)
    blob = codec.encode_image(w, img, window=300)
    header, payload, image_payload = codec.parse_container(blob)
    assert (header.width, header.height, header.channels) == (9, 5, 1)
    assert header.bit_depth == 8
    assert header.patch == w.config.patch
    assert header.delta == w.config.delta
    assert header.mixtures == w.config.mixtures
    assert header.window == 300
    assert header.model_hash == w.content_hash()
    assert payload == b""
    assert len(image_payload) > 0


def test_wrong_weights_rejected():
    w1, w2 = _weights(10), _weights(11)
    img = np.zeros((1, 8, 8), dtype=np.int64)
    blob = codec.encode_image(w1, img, window=512)
    with pytest.raises(ValueError, match="different model weights"):
        codec.decode_image(w2, blob)


def test_bad_magic_and_truncation_rejected():
    w = _weights(12)
    img = np.zeros((1, 8, 8), dtype=np.int64)
    blob = codec.encode_image(w, img, window=512)
    with pytest.raises(ValueError):
        codec.parse_container(b"JUNK" + blob[4:])
    with pytest.raises(ValueError):
        codec.parse_container(blob[:10])


def test_corrupt_payload_never_hangs():
    # flipped payload bytes must either raise or decode to a wrong image
    w = _weights(13)
    rng = np.random.default_rng(14)
    img = rng.integers(0, 256, size=(1, 16, 16))
    blob = bytearray(codec.encode_image(w, img, window=512))
    blob[-5] ^= 0xA5
    try:
        out = codec.decode_image(w, bytes(blob))
        assert out.shape == img.shape
    except ValueError:
        pass


def test_16bit_encode_tables_stay_small():
    # O(R) window memory: no 65536-entry table for a 16-bit alphabet
    w = _weights(15, bit_depth=16)
    rng = np.random.default_rng(16)
    img = rng.integers(0, 65536, size=(1, 16, 16))
    prob.reset_peak_table_entries()
    codec.encode_image(w, img, window=1024)
    assert prob.peak_table_entries <= 1024 + 2


def test_bpsp():
    assert codec.bpsp(b"x" * 100, (1, 10, 10)) == pytest.approx(8.0)


# ---------------------------------------------------------------------------
# image file I/O

def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(1, 11, 13))
    path = tmp_path / "a.pgm"
    codec.write_pnm(path, img)
    back, maxval = codec.read_pnm(path)
    np.testing.assert_array_equal(back, img)
    assert maxval == 255


def test_ppm_16bit_roundtrip(tmp_path):
    img = np.random.default_rng(1).integers(0, 65536, size=(3, 7, 5))
    path = tmp_path / "a.ppm"
    codec.write_pnm(path, img, maxval=65535)
    back, maxval = codec.read_pnm(path)
    np.testing.assert_array_equal(back, img)
    assert maxval == 65535


def test_pnm_comments_and_ascii_rejected(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x01\x02\x03")
    img, maxval = codec.read_pnm(path)
    np.testing.assert_array_equal(img, [[[0, 1], [2, 3]]])
    path.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(ValueError, match="ASCII"):
        codec.read_pnm(path)


def test_raw16_roundtrip(tmp_path):
    img = np.random.default_rng(2).integers(0, 4096, size=(1, 6, 8))
    path = tmp_path / "a.raw"
    codec.write_raw16(path, img, bit_depth=12)
    back, depth = codec.read_raw16(path)
    np.testing.assert_array_equal(back, img)
    assert depth == 12


def test_read_image_dispatch(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, size=(1, 4, 4))
    codec.write_image(tmp_path / "x.pgm", img, 8)
    back, depth = codec.read_image(tmp_path / "x.pgm")
    np.testing.assert_array_equal(back, img)
    assert depth == 8
    with pytest.raises(ValueError):
        codec.read_image(tmp_path / "x.png")
