import numpy as np
import pytest

import vimq


def test_codebook_levels():
    assert vimq.build_codebook([1, 2, 4], [3]) == [0, 0.0625, 0.125, 0.1875, 0.25, 0.375, 0.5, 0.625]
    assert len(vimq.codebook_levels(3)) == 4
    assert len(vimq.codebook_levels(5)) == 16
    with pytest.raises(ValueError):
        vimq.build_codebook([1], [1])


def test_weight_and_token_quantization():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((8, 64)).astype(np.float32)
    codes, scales = vimq.quantize_weights(w, block=32, bits=4)
    assert codes.shape == (8, 64) and codes.dtype == np.uint8
    assert scales.shape == (16,)
    np.testing.assert_array_equal(scales, np.abs(w.reshape(-1, 32)).max(axis=1))
    deq = vimq.dequantize_weights(w, block=32, bits=4)
    assert np.all(np.abs(deq) <= np.repeat(scales, 32).reshape(8, 64))

    x = np.array([0.3, -1.27, 0.5], dtype=np.float32)
    q, s = vimq.quantize_token(x)
    assert q.tolist() == [30, -127, 50]
    assert s == pytest.approx(0.01)


def test_linear_engine_matches_oracle_bit_for_bit():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 192)).astype(np.float32)
    w = rng.standard_normal((384, 192)).astype(np.float32)
    b = rng.uniform(-0.5, 0.5, 384).astype(np.float32)
    for tile in (16, 32, 64):
        y, counters = vimq.linear_quantized(x, w, b, tile=tile, activation="silu")
        ref = vimq.linear_oracle(x, w, b, tile=tile, activation="silu")
        assert y.tobytes() == ref.tobytes()
        assert counters["tiles"] == 3 * (192 // tile) * (384 // tile)
    y, _ = vimq.linear_quantized(x, w, b)
    exact = x @ w.T + b
    assert vimq.cosine_similarity(y.ravel(), exact.ravel()) > 0.95


def test_ssm_engine_matches_scan_oracle():
    rng = np.random.default_rng(2)
    L, D, N = 40, 8, 16
    u, z, B, C = (rng.standard_normal(s) for s in [(L, D), (L, D), (L, N), (L, N)])
    delta = np.log1p(np.exp(rng.uniform(-4, 1, (L, D))))
    A = -np.tile(np.arange(1, N + 1, dtype=float), (D, 1))
    Dk = rng.standard_normal(D)
    ref = vimq.ssm_scan_oracle(u, delta, A, B, C, Dk, z)
    got64 = vimq.ssm_forward(u, delta, A, B, C, Dk, z, f64=True)
    got32 = vimq.ssm_forward(u, delta, A, B, C, Dk, z)
    assert got32.dtype == np.float32
    assert np.linalg.norm(got64 - ref) <= 1e-12 * np.linalg.norm(ref)
    assert np.linalg.norm(got32 - ref) <= 1e-5 * np.linalg.norm(ref)


def test_model_float_and_quantized(tmp_path):
    m = vimq.init_model("tiny", blocks=2, classes=10, seed=3)
    assert m.config.d_model == 192 and m.config.dt_rank == 12
    img = vimq.random_image(64, 64, seed=4)
    assert img.shape == (3, 64, 64)
    f = m.forward(img)
    assert f.shape == (10,)
    calib = vimq.calibrate(m, [vimq.random_image(64, 64, seed=5)])
    q = vimq.quantize_model(m, calib, bits=4, block=32)
    y1, y2 = q.forward(img), q.forward(img)
    assert vimq.hash_floats(y1) == vimq.hash_floats(y2)
    assert vimq.cosine_similarity(y1, f) > 0.5

    q.save(tmp_path / "q.vimq")
    assert vimq.load_quant_model(tmp_path / "q.vimq").forward(img).tobytes() == y1.tobytes()
    m.save(tmp_path / "m.vimq")
    assert vimq.load_model(tmp_path / "m.vimq").forward(img).tobytes() == f.tobytes()

    with pytest.raises(ValueError, match="calibration"):
        vimq.quantize_model(m, None, smooth=True)
    with pytest.raises(ValueError):
        m.forward(vimq.random_image(60, 60))
