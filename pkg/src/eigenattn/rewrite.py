"""Fold eigenbases into attention weights and run the low-rank layers."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .attention import AttentionWeights, LayerCache, alibi_slopes, attend, rope_rotate
from .basis import EigenBasis, LayerBasis
from .linalg import softmax_rows
from .model import TransformerWeights

# A merged layer is an AttentionWeights with reduced widths (plus key_unproject for RoPE).
CompressedLayer = AttentionWeights


def _check(w: AttentionWeights, basis: LayerBasis) -> None:
    if not w.is_full_rank:
        raise ValueError("basis must be merged into uncompressed weights")
    h, dh = w.n_heads, w.d_head
    if basis.u_k.shape[:2] != (h, dh) or basis.u_v.shape[:2] != (h, dh):
        raise ValueError(f"basis shapes {basis.u_k.shape}/{basis.u_v.shape} do not fit {h} heads of width {dh}")


def merge_basis(w: AttentionWeights, basis: LayerBasis) -> CompressedLayer:
    """W^Q U^K, W^K U^K, W^V U^V and (U^V)^T W^O for every head."""
    _check(w, basis)
    u_k, u_v = basis.u_k, basis.u_v
    return AttentionWeights(
        wq=w.wq @ u_k,
        wk=w.wk @ u_k,
        wv=w.wv @ u_v,
        wo=u_v.transpose(0, 2, 1) @ w.wo,
    )


def merge_rope_basis(w: AttentionWeights, basis: LayerBasis) -> CompressedLayer:
    """RoPE variant: queries stay full width, keys are cached in the shared basis.

    ``key_unproject`` = (U^K)^T lifts cached keys back to ``d_head`` before rotation.
    """
    _check(w, basis)
    if not basis.shared:
        raise ValueError("RoPE layers need a key basis shared across heads")
    u = basis.u_k[0]
    return AttentionWeights(
        wq=w.wq.copy(),
        wk=w.wk @ u,
        wv=w.wv @ basis.u_v,
        wo=basis.u_v.transpose(0, 2, 1) @ w.wo,
        key_unproject=np.ascontiguousarray(u.T),
    )


def compress_model(weights: TransformerWeights, basis: EigenBasis) -> TransformerWeights:
    """Copy of ``weights`` with every layer's attention replaced by its merged form."""
    if len(basis.layers) != len(weights.layers):
        raise ValueError("basis and model disagree on the number of layers")
    rope = weights.spec.pos_mode == "rope"
    out = weights.copy()
    for layer, b in zip(out.layers, basis.layers):
        layer.attn = merge_rope_basis(layer.attn, b) if rope else merge_basis(layer.attn, b)
    out.meta = {**weights.meta, "eps_th": [b.eps_th for b in basis.layers],
                "shared_key_basis": [b.shared for b in basis.layers]}
    return out


def eigen_attention_forward(x: np.ndarray, layer: CompressedLayer, cache: LayerCache,
                            pos_mode: str = "learned", **kw) -> np.ndarray:
    """Low-rank attention; keys/values are cached at widths ``r_k`` / ``r_v``."""
    if pos_mode == "rope":
        raise ValueError("use rope_eigen_forward for RoPE layers")
    if (cache.k_rank, cache.v_rank) != (layer.k_rank, layer.v_rank):
        raise ValueError("cache ranks do not match the layer")
    return attend(x, layer, cache, pos_mode=pos_mode, **kw)


def rope_eigen_forward(x: np.ndarray, layer: CompressedLayer, cache: LayerCache,
                       positions: Optional[np.ndarray] = None, **kw) -> np.ndarray:
    """RoPE eigen attention: lift cached keys, rotate keys and full-width queries, attend.

    ``positions`` defaults to the next slots after the cache; explicit positions
    must be exactly those slots.
    """
    if layer.key_unproject is None:
        raise ValueError("RoPE eigen attention needs a shared key basis (key_unproject missing)")
    if positions is not None:
        expect = np.arange(cache.seq_len, cache.seq_len + len(x))
        if not np.array_equal(np.asarray(positions), expect):
            raise ValueError(f"positions must continue the cache: expected {expect.tolist()}")
    return attend(x, layer, cache, pos_mode="rope", **kw)


def projected_attention(x: np.ndarray, w: AttentionWeights, basis: LayerBasis,
                        pos_mode: str = "learned", rope_theta: float = 10000.0) -> np.ndarray:
    """Causal attention on inputs projected as Q U U^T, K U U^T, V U U^T with the original weights.

    For RoPE only keys are projected (queries stay full rank) and the
    rotation acts on the projected keys.
    """
    n = x.shape[0]
    h, dh = w.n_heads, w.d_head
    out = np.zeros((n, w.d_model))
    qpos = np.arange(n)
    dist = qpos[:, None] - qpos[None, :]
    for i in range(h):
        pk = basis.u_k[i] @ basis.u_k[i].T
        pv = basis.u_v[i] @ basis.u_v[i].T
        q = x @ w.wq[i]
        k = x @ w.wk[i] @ pk
        v = x @ w.wv[i] @ pv
        if pos_mode == "rope":
            q, k = rope_rotate(q, qpos, rope_theta), rope_rotate(k, qpos, rope_theta)
        else:
            q = q @ pk
        s = q @ k.T / math.sqrt(dh)
        if pos_mode == "alibi":
            s = s - alibi_slopes(h)[i] * dist
        s = np.where(dist < 0, -np.inf, s)
        out += softmax_rows(s) @ v @ w.wo[i]
    return out
