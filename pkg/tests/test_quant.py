import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eigenattn.attention import KvCache, LayerCache
from eigenattn.model import perplexity
from eigenattn.quant import (CURVE_COLUMNS, QuantConfig, eval_stacked, fake_quantize, key_config, kv_bytes,
                             kv_transform, matrix_bytes, quantize, quantize_cache, unpack_codes, value_config)


def test_config_validation():
    with pytest.raises(ValueError):
        QuantConfig(1, 8)
    with pytest.raises(ValueError):
        QuantConfig(4, 0)
    with pytest.raises(ValueError):
        QuantConfig(4, 8, "head")
    assert QuantConfig(16, 1).identity


@pytest.mark.parametrize("cfg", [key_config(2, 4), value_config(3, 5)])
def test_constant_tensor_is_exact(cfg):
    t = np.full((7, 6), -1.25)
    q = quantize(t, cfg)
    assert np.all(q.scales == 0)
    assert np.array_equal(q.dequantize(), t)


def test_four_levels_at_two_bits():
    t = np.array([[0.0, 1.0, 2.0, 3.0]])
    q = quantize(t, value_config(2, 4))
    assert q.codes.tolist() == [[0, 1, 2, 3]]
    assert np.allclose(q.dequantize(), t, atol=1e-12)


def test_seeded_error_bound_four_bits():
    t = np.random.default_rng(0).standard_normal((64, 48))
    for cfg in (key_config(4, 32), value_config(4, 32)):
        q = quantize(t, cfg)
        deq = q.dequantize()
        m, dm = (t.T, deq.T) if cfg.axis == "channel" else (t, deq)
        err = np.abs(dm - m)
        idx = np.arange(m.shape[1]) // 32
        assert np.all(err <= q.scales[:, idx] / 2 + 1e-9)


@settings(max_examples=60, deadline=None)
@given(t=arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 20)),
                elements=st.floats(-50, 50, allow_nan=False)),
       bits=st.sampled_from([2, 3, 4, 8]), g=st.integers(1, 24), axis=st.sampled_from(["channel", "token"]))
def test_quant_properties(t, bits, g, axis):
    cfg = QuantConfig(bits, g, axis)
    q = quantize(t, cfg)
    deq = q.dequantize()
    assert deq.shape == t.shape
    assert q.codes.max() < 2 ** bits
    m, dm = (t.T, deq.T) if axis == "channel" else (t, deq)
    idx = np.arange(m.shape[1]) // g
    # round-trip bound, then the per-group envelope
    assert np.all(np.abs(dm - m) <= q.scales[:, idx] / 2 + 1e-9)
    for j in range(q.scales.shape[1]):
        blk, dblk = m[:, j * g:(j + 1) * g], dm[:, j * g:(j + 1) * g]
        lo, hi = blk.min(axis=1, keepdims=True), blk.max(axis=1, keepdims=True)
        s = q.scales[:, j:j + 1]
        assert np.all(dblk >= lo - s / 2 - 1e-9) and np.all(dblk <= hi + s / 2 + 1e-9)
    # order preservation within each group
    codes = q.codes.astype(int)
    for r in range(m.shape[0]):
        for j in range(q.scales.shape[1]):
            sl = slice(j * g, (j + 1) * g)
            order = np.argsort(m[r, sl], kind="stable")
            assert np.all(np.diff(codes[r, sl][order]) >= 0)
    # serialized size matches the byte model
    assert len(q.to_bytes()) == q.nbytes()
    packed = q.to_bytes()[: -(4 * q.n_groups)]
    assert np.array_equal(unpack_codes(packed, q.codes.size, bits), q.codes.reshape(-1))


def test_short_last_group():
    t = np.arange(10, dtype=float)[None]
    q = quantize(t, value_config(4, 4))
    assert q.scales.shape == (1, 3)
    assert np.allclose(q.dequantize(), t, atol=0.5 * q.scales.max() + 1e-12)


def test_rejects_nonfinite_and_identity():
    with pytest.raises(ValueError):
        quantize(np.array([[np.inf]]), value_config(4, 4))
    with pytest.raises(ValueError):
        quantize(np.ones((2, 2)), QuantConfig(16, 4))


def test_identity_passthrough():
    t = np.random.default_rng(0).standard_normal((5, 5))
    assert np.array_equal(fake_quantize(t, QuantConfig(16, 8)), t)
    assert kv_transform(QuantConfig(16, 8), QuantConfig(16, 8, "token")) is None


def test_kv_bytes_unquantized_reduces_to_formula():
    b, n, dh, h, L, p = 2, 100, 16, 4, 3, 16
    assert kv_bytes([(dh, dh)] * L, h, n, batch=b, precision_bits=p) == 2 * b * n * dh * h * L * p // 8


def test_halving_rank_halves_code_bytes():
    full = matrix_bytes(64, 32, key_config(4, 16)) - 4 * 32 * 4
    half = matrix_bytes(64, 16, key_config(4, 16)) - 4 * 16 * 4
    assert half * 2 == full


def test_7b_shaped_cache_is_one_gib():
    # 32 layers x 32 heads x 128 channels x 2048 tokens, keys and values, 2 bytes each
    assert kv_bytes([(128, 128)] * 32, 32, 2048) == 2 ** 30


def test_fewer_bits_never_more_bytes():
    for g in (16, 32, 128):
        sizes = [kv_bytes([(8, 6)] * 2, 4, 64, key_cfg=key_config(b, g), value_cfg=value_config(b, g))
                 for b in (2, 3, 4, 8)]
        assert sizes == sorted(sizes)


def test_kv_bytes_matches_serialized_cache():
    rng = np.random.default_rng(0)
    ranks, h, n = [(3, 5), (8, 2)], 2, 37
    cache = KvCache([LayerCache(h, rk, rv) for rk, rv in ranks])
    for lc, (rk, rv) in zip(cache.layers, ranks):
        lc.append(rng.standard_normal((h, n, rk)), rng.standard_normal((h, n, rv)))
    for bits, g in ((2, 16), (3, 32), (4, 128)):
        kc, vc = key_config(bits, g), value_config(bits, g)
        serialized = sum(len(q.to_bytes()) for q in quantize_cache(cache, kc, vc))
        assert serialized == kv_bytes(ranks, h, n, key_cfg=kc, value_cfg=vc)


def test_eval_stacked_rows(small_trained, corpus):
    _, split = corpus
    w = small_trained["learned"]
    rows = eval_stacked({"standard": w}, split.heldout, grid=[(4, 32), (2, 16)], max_windows=2)
    assert [r["bits"] for r in rows] == [16, 4, 2]
    assert set(rows[0]) == set(CURVE_COLUMNS)
    assert abs(rows[0]["ppl"] - perplexity(w, split.heldout, max_windows=2)) < 1e-6
    assert rows[0]["kv_bytes"] > rows[1]["kv_bytes"] > rows[2]["kv_bytes"]
