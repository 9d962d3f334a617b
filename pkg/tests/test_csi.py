import numpy as np
import pytest

from hpac import csi, model, scan
from hpac import numerics as nm


def _rand_model(seed, **kw):
    cfg = model.tiny_config(**kw)
    return model.init_weights(cfg, np.random.default_rng(seed))


def test_extract_active_matches_weight_taps():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    mask = scan.build_mask("permissive", 3, 1).bits
    aw = csi.extract_active(w, mask)
    assert aw.offsets == tuple(nm.active_taps(mask))
    for a, (dr, dc) in enumerate(aw.offsets):
        np.testing.assert_array_equal(aw.w[:, :, a], w[:, :, dr + 1, dc + 1])
    # depthwise weights collapse the singleton input axis
    dw = rng.normal(size=(4, 1, 3, 3)).astype(np.float32)
    awd = csi.extract_active(dw, mask)
    assert awd.w.shape == (4, len(awd.offsets))


def test_gather_multiply_equals_masked_conv():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, 7, 6)).astype(np.float32)
    w = rng.normal(size=(5, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=5).astype(np.float32)
    mask = scan.build_mask("strict", 3, 2).bits
    full = nm.conv2d_masked(x, w, mask, b)
    aw = csi.extract_active(w, mask, b)
    positions = [(r, c) for r in range(7) for c in range(6)]
    y = csi.gather_multiply(x[0], positions, aw)
    want = full[0].reshape(5, -1).T
    np.testing.assert_allclose(y, want, atol=1e-5)


@pytest.mark.parametrize("seed,kw", [
    (0, {}),
    (1, {"channels_in": 3}),
    (2, {"patch": 8, "delta": 2}),
    (3, {"depth": 1, "mixtures": 3}),
])
def test_csi_matches_parallel_forward(seed, kw):
    w = _rand_model(seed, **kw)
    cfg = w.config
    rng = np.random.default_rng(seed + 100)
    H = W = 2 * cfg.patch
    x = rng.uniform(-1, 1, size=(cfg.channels_in, H, W)).astype(np.float32)
    par = model.forward(w, x[None])[0]  # [Cin, K, 3, H, W]
    seq = csi.csi_forward(w, x)
    assert np.abs(par - seq).max() <= 1e-4


def test_first_step_ignores_image():
    # every strict tap of group 0 falls outside the patch: the first step's
    # output cannot depend on any pixel value
    w = _rand_model(5)
    cfg = w.config
    H = W = cfg.patch
    rng = np.random.default_rng(6)
    outs = []
    for _ in range(2):
        eng = csi.CsiEngine(w, H, W)
        eng.prefill_image(rng.uniform(-1, 1, size=(1, H, W)).astype(np.float32))
        outs.append(eng.step(0))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_progressive_writes_bit_identical_to_prefill():
    """Decoder-style per-step writes reproduce the encoder path exactly."""
    w = _rand_model(7)
    cfg = w.config
    H = W = 2 * cfg.patch
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, size=(1, H, W)).astype(np.float32)

    enc = csi.CsiEngine(w, H, W)
    enc.prefill_image(x)
    dec = csi.CsiEngine(w, H, W, debug=True)
    for i in range(enc.num_steps):
        a = enc.step(i)
        b = dec.step(i)
        np.testing.assert_array_equal(a, b)
        pos = dec._steps[i]["pos"]
        dec.write_pixels(i, x[:, pos[:, 0], pos[:, 1]].T)


def test_future_pixels_cannot_change_steps():
    # bit-exact causality at the engine level: zeroing all future-group
    # pixels before prefill leaves earlier step outputs unchanged
    w = _rand_model(9)
    cfg = w.config
    H = W = cfg.patch
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, size=(1, H, W)).astype(np.float32)
    gmap = scan.group_map(scan.ScanSpec(cfg.patch, cfg.delta))
    sched = scan.build_schedule(scan.ScanSpec(cfg.patch, cfg.delta))
    probe = len(sched.groups) // 2
    s_probe = sched.groups[probe][0]

    x2 = x.copy()
    x2[:, gmap > s_probe] = 0.0

    e1 = csi.CsiEngine(w, H, W)
    e1.prefill_image(x)
    e2 = csi.CsiEngine(w, H, W)
    e2.prefill_image(x2)
    for i in range(probe + 1):
        np.testing.assert_array_equal(e1.step(i), e2.step(i))


def test_steps_must_run_in_order():
    w = _rand_model(11)
    eng = csi.CsiEngine(w, w.config.patch, w.config.patch)
    eng.prefill_image(np.zeros((1, w.config.patch, w.config.patch),
                               dtype=np.float32))
    with pytest.raises(RuntimeError):
        eng.step(1)
    eng.step(0)
    with pytest.raises(RuntimeError):
        eng.step(0)


def test_debug_mode_catches_unwritten_reads():
    w = _rand_model(12)
    eng = csi.CsiEngine(w, w.config.patch, w.config.patch, debug=True)
    eng.step(0)  # group 0 reads nothing
    with pytest.raises(RuntimeError):
        eng.step(1)  # group 1 needs pixels the decoder never wrote


def test_engine_rejects_unpadded_dims():
    w = _rand_model(13)
    with pytest.raises(ValueError):
        csi.CsiEngine(w, w.config.patch + 1, w.config.patch)
