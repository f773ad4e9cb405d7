import numpy as np
import pytest

from eigenattn.attention import (AttentionConfig, AttentionWeights, FlopCounter, KvCache, LayerCache,
                                 alibi_slopes, batch_cache_bits, decode_step, prefill, reference_attention,
                                 rope_matrix, rope_rotate)


def random_weights(rng, d=8, h=2, r=None):
    dh = d // h
    r = r or dh
    return AttentionWeights(
        wq=rng.standard_normal((h, d, r)) / np.sqrt(d),
        wk=rng.standard_normal((h, d, r)) / np.sqrt(d),
        wv=rng.standard_normal((h, d, r)) / np.sqrt(d),
        wo=rng.standard_normal((h, r, d)) / np.sqrt(d),
    )


def fresh(w):
    return LayerCache(w.n_heads, w.k_rank, w.v_rank)


def test_config_validation():
    assert AttentionConfig(8, 2).d_head == 4
    with pytest.raises(ValueError):
        AttentionConfig(9, 2)
    with pytest.raises(ValueError):
        AttentionConfig(8, 2, kv_rank=5)
    with pytest.raises(ValueError):
        AttentionConfig(8, 2, pos_mode="sinusoid")


def test_single_token_routes_value_through_wo(rng):
    w = random_weights(rng)
    x = rng.standard_normal((1, 8))
    out = prefill(x, w, fresh(w))
    expect = sum((x @ w.wv[i]) @ w.wo[i] for i in range(w.n_heads))
    assert np.allclose(out, expect)


@pytest.mark.parametrize("mode", ["learned", "alibi", "rope"])
def test_prefill_matches_loop_reference(rng, mode):
    w = random_weights(rng)
    x = rng.standard_normal((6, 8))
    out = prefill(x, w, fresh(w), pos_mode=mode)
    assert np.max(np.abs(out - reference_attention(x, w, mode))) < 1e-6


def test_duplicate_tokens_give_equal_rows(rng):
    w = random_weights(rng)
    x = np.tile(rng.standard_normal((1, 8)), (5, 1))
    out = prefill(x, w, fresh(w))
    assert np.allclose(out, out[0])


def test_prefill_fills_cache(rng):
    w = random_weights(rng)
    c = fresh(w)
    prefill(rng.standard_normal((5, 8)), w, c)
    assert c.keys.shape == (2, 5, 4) and c.values.shape == (2, 5, 4)
    with pytest.raises(ValueError):
        prefill(rng.standard_normal((1, 8)), w, c)


def test_shape_mismatch(rng):
    w = random_weights(rng)
    with pytest.raises(ValueError):
        prefill(rng.standard_normal((3, 7)), w, fresh(w))


def test_decode_after_empty_equals_single_prefill(rng):
    w = random_weights(rng)
    x = rng.standard_normal((1, 8))
    assert np.allclose(decode_step(x, w, fresh(w)), prefill(x, w, fresh(w)))


@pytest.mark.parametrize("mode,r", [("learned", 4), ("learned", 2), ("alibi", 4), ("alibi", 2), ("rope", 4)])
def test_decode_matches_prefill_rows(rng, mode, r):
    w = random_weights(rng, r=r)
    x = rng.standard_normal((8, 8))
    full = prefill(x, w, fresh(w), pos_mode=mode)
    c = fresh(w)
    for t in range(8):
        row = decode_step(x[t], w, c, pos_mode=mode)
        assert c.seq_len == t + 1
        assert np.max(np.abs(row - full[t])) < 1e-6


def test_causality(rng):
    w = random_weights(rng)
    x = rng.standard_normal((7, 8))
    base = prefill(x, w, fresh(w))
    for t in range(6):
        y = x.copy()
        y[t + 1:] += rng.standard_normal((6 - t, 8))
        assert np.allclose(prefill(y, w, fresh(w))[: t + 1], base[: t + 1])


@pytest.mark.parametrize("n", [1, 5, 17])
def test_decode_flop_counter_matches_table_formula(rng, n):
    d, h, r = 16, 2, 3
    w = random_weights(rng, d=d, h=h, r=r)
    c = fresh(w)
    prefill(rng.standard_normal((n - 1, d)), w, c) if n > 1 else None
    counter = FlopCounter()
    decode_step(rng.standard_normal((1, d)), w, c, counter=counter)
    total_r = h * r
    assert counter.total == 4 * d * total_r + 2 * n * total_r


def test_cache_bits_formula():
    b, n, r, h, L, p = 3, 10, 4, 2, 5, 16
    caches = []
    for _ in range(b):
        kv = KvCache([LayerCache(h, r, r) for _ in range(L)], precision_bits=p)
        for lc in kv.layers:
            lc.append(np.zeros((h, n, r)), np.zeros((h, n, r)))
        caches.append(kv)
    assert batch_cache_bits(caches) == 2 * b * n * r * h * L * p


def test_cache_rank_mismatch():
    c = LayerCache(2, 3, 4)
    with pytest.raises(ValueError):
        c.append(np.zeros((2, 1, 4)), np.zeros((2, 1, 4)))


def test_alibi_slopes_geometric():
    assert np.allclose(alibi_slopes(4), [2 ** -2, 2 ** -4, 2 ** -6, 2 ** -8])
    s = alibi_slopes(6)
    assert len(s) == 6 and np.all(s > 0)


def test_rope_rotate_matches_dense_matrix(rng):
    x = rng.standard_normal((5, 8))
    pos = np.arange(5)
    dense = np.stack([x[t] @ rope_matrix(t, 8) for t in pos])
    assert np.allclose(rope_rotate(x, pos), dense)
    assert np.allclose(rope_matrix(0, 8), np.eye(8))
    r = rope_matrix(3, 8)
    assert np.allclose(r @ r.T, np.eye(8))


def test_weights_validation(rng):
    w = random_weights(rng)
    with pytest.raises(ValueError):
        AttentionWeights(w.wq, w.wk[:, :, :2], w.wv, w.wo)
    with pytest.raises(ValueError):
        AttentionWeights(w.wq, w.wk, w.wv, w.wo[:, :2])
