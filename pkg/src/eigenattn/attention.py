"""Multi-head attention with an explicit KV cache.

One code path serves standard attention (every width equal to ``d_head``),
merged low-rank attention (query/key width ``r_k``, value width ``r_v``) and
the RoPE variant, where cached low-rank keys are lifted back to ``d_head``
with a shared ``key_unproject`` matrix before the rotation is applied.

Shapes used throughout::

    wq  (h, d, r_q)    wk (h, d, r_k)    wv (h, d, r_v)    wo (h, r_v, d)
    cached keys (h, n, r_k), cached values (h, n, r_v)
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import softmax_rows

POS_MODES = ("learned", "alibi", "rope")

KvTransform = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    kv_rank: Optional[int] = None
    pos_mode: str = "learned"

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible into {self.n_heads} heads")
        if self.pos_mode not in POS_MODES:
            raise ValueError(f"unknown pos_mode {self.pos_mode!r}; expected one of {POS_MODES}")
        if self.kv_rank is not None and not 1 <= self.kv_rank <= self.d_head:
            raise ValueError(f"kv_rank={self.kv_rank} outside [1, {self.d_head}]")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rank(self) -> int:
        return self.d_head if self.kv_rank is None else self.kv_rank


@dataclass
class AttentionWeights:
    """Per-head projection weights of one attention block.

    For the standard layer every rank equals ``d_head``; after merging an
    eigenbasis the key/query width is ``r_k`` and the value width ``r_v``.
    ``key_unproject`` (``r_k x d_head``) is only present for RoPE layers,
    whose queries stay full width.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    key_unproject: Optional[np.ndarray] = None

    def __post_init__(self):
        h, d, _ = self.wq.shape
        if self.wk.shape[:2] != (h, d) or self.wv.shape[:2] != (h, d):
            raise ValueError("wq/wk/wv disagree on (n_heads, d_model)")
        if self.wo.shape != (h, self.wv.shape[2], d):
            raise ValueError(f"wo shape {self.wo.shape} != {(h, self.wv.shape[2], d)}")
        if d % h:
            raise ValueError(f"d_model={d} not divisible by n_heads={h}")
        if self.key_unproject is not None:
            if self.key_unproject.shape != (self.k_rank, self.d_head):
                raise ValueError(
                    f"key_unproject shape {self.key_unproject.shape} != {(self.k_rank, self.d_head)}")
            if self.q_rank != self.d_head:
                raise ValueError("lifted keys need full-width queries")
        elif self.q_rank != self.k_rank:
            raise ValueError(f"query width {self.q_rank} != key width {self.k_rank}")

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def q_rank(self) -> int:
        return self.wq.shape[2]

    @property
    def k_rank(self) -> int:
        return self.wk.shape[2]

    @property
    def v_rank(self) -> int:
        return self.wv.shape[2]

    @property
    def is_full_rank(self) -> bool:
        return self.k_rank == self.d_head and self.v_rank == self.d_head and self.key_unproject is None

    def param_count(self, include_unproject: bool = False) -> int:
        n = self.wq.size + self.wk.size + self.wv.size + self.wo.size
        if include_unproject and self.key_unproject is not None:
            n += self.key_unproject.size
        return n

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if self.key_unproject is not None:
            out["key_unproject"] = self.key_unproject
        return out


def split_heads(wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
                n_heads: int) -> AttentionWeights:
    """Build per-head weights from dense ``d x d`` projections (head-major columns)."""
    d = wq.shape[0]
    dh = d // n_heads

    def cols(w):
        return np.ascontiguousarray(w.reshape(d, n_heads, dh).transpose(1, 0, 2))

    return AttentionWeights(cols(wq), cols(wk), cols(wv), np.ascontiguousarray(wo.reshape(n_heads, dh, d)))


class FlopCounter:
    """Multiply-accumulate tally by category (``proj``, ``score``, ``mix``, ``lift``)."""

    def __init__(self):
        self.macs: Counter = Counter()

    def add(self, kind: str, n: int) -> None:
        self.macs[kind] += int(n)

    @property
    def total(self) -> int:
        return sum(v for k, v in self.macs.items() if k != "lift")

    def reset(self) -> None:
        self.macs.clear()


class LayerCache:
    """Append-only key/value store for one layer of one sequence."""

    def __init__(self, n_heads: int, k_rank: int, v_rank: int):
        self.keys = np.zeros((n_heads, 0, k_rank))
        self.values = np.zeros((n_heads, 0, v_rank))

    @property
    def seq_len(self) -> int:
        return self.keys.shape[1]

    @property
    def k_rank(self) -> int:
        return self.keys.shape[2]

    @property
    def v_rank(self) -> int:
        return self.values.shape[2]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        if k.shape[2] != self.k_rank or v.shape[2] != self.v_rank:
            raise ValueError(
                f"cache holds ranks ({self.k_rank}, {self.v_rank}), got ({k.shape[2]}, {v.shape[2]})")
        self.keys = np.concatenate([self.keys, k], axis=1)
        self.values = np.concatenate([self.values, v], axis=1)

    def elements(self) -> int:
        return self.keys.size + self.values.size


@dataclass
class KvCache:
    """Cache for one sequence across all layers; ``bits`` applies the batch factor."""

    layers: list[LayerCache]
    batch: int = 1
    precision_bits: int = 16

    @classmethod
    def for_layers(cls, layers: list[AttentionWeights], precision_bits: int = 16) -> "KvCache":
        return cls([LayerCache(w.n_heads, w.k_rank, w.v_rank) for w in layers],
                   precision_bits=precision_bits)

    @property
    def seq_len(self) -> int:
        return self.layers[0].seq_len if self.layers else 0

    def elements(self) -> int:
        return sum(c.elements() for c in self.layers)

    def bits(self) -> int:
        return self.batch * self.elements() * self.precision_bits


def batch_cache_bits(caches: list[KvCache]) -> int:
    return sum(c.bits() for c in caches)


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Geometric per-head slopes, with the usual interleave for non-power-of-two head counts."""

    def pow2(n):
        start = 2.0 ** (-8.0 / n)
        return [start ** (i + 1) for i in range(n)]

    if math.log2(n_heads).is_integer():
        return np.array(pow2(n_heads))
    closest = 2 ** math.floor(math.log2(n_heads))
    extra = pow2(2 * closest)[0::2][: n_heads - closest]
    return np.array(pow2(closest) + extra)


def rope_angles(positions: np.ndarray, dim: int, theta: float = 10000.0) -> np.ndarray:
    inv_freq = 1.0 / theta ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rope_rotate(x: np.ndarray, positions, theta: float = 10000.0) -> np.ndarray:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` of the last axis by position."""
    dim = x.shape[-1]
    if dim % 2:
        raise ValueError(f"RoPE needs an even head width, got {dim}")
    ang = rope_angles(np.asarray(positions), dim, theta)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_matrix(position: int, dim: int, theta: float = 10000.0) -> np.ndarray:
    """Dense rotation ``R_t`` with ``rope_rotate(x, [t]) == x @ R_t`` for a row vector."""
    r = np.zeros((dim, dim))
    for i in range(dim // 2):
        a = position / theta ** (2 * i / dim)
        c, s = math.cos(a), math.sin(a)
        r[2 * i, 2 * i], r[2 * i, 2 * i + 1] = c, s
        r[2 * i + 1, 2 * i], r[2 * i + 1, 2 * i + 1] = -s, c
    return r


def attend(x: np.ndarray, w: AttentionWeights, cache: LayerCache, *, pos_mode: str = "learned",
           rope_theta: float = 10000.0, counter: Optional[FlopCounter] = None,
           kv_transform: Optional[KvTransform] = None,
           capture: Optional[dict] = None) -> np.ndarray:
    """Attend ``x`` (m new tokens, m x d) over the cache after appending their keys/values.

    The new tokens occupy positions ``cache.seq_len .. cache.seq_len + m - 1``;
    causality is enforced by masking later key positions.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.d_model:
        raise ValueError(f"input shape {x.shape} incompatible with d_model={w.d_model}")
    if pos_mode not in POS_MODES:
        raise ValueError(f"unknown pos_mode {pos_mode!r}")
    if w.key_unproject is not None and pos_mode != "rope":
        raise ValueError("key_unproject is only meaningful for RoPE layers")
    h, d, dh = w.n_heads, w.d_model, w.d_head
    m = x.shape[0]
    start = cache.seq_len

    q = np.einsum("nd,hdr->hnr", x, w.wq)
    k_new = np.einsum("nd,hdr->hnr", x, w.wk)
    v_new = np.einsum("nd,hdr->hnr", x, w.wv)
    if capture is not None:
        capture.update(q=q, k=k_new, v=v_new)
    cache.append(k_new, v_new)
    keys, values = cache.keys, cache.values
    n = keys.shape[1]
    if kv_transform is not None:
        keys, values = kv_transform(keys, values)

    if counter is not None:
        counter.add("proj", m * d * (w.q_rank + w.k_rank + w.v_rank) * h)
    if w.key_unproject is not None:
        keys = keys @ w.key_unproject
        if counter is not None:
            counter.add("lift", h * n * w.k_rank * dh)

    qpos = np.arange(start, start + m)
    kpos = np.arange(n)
    if pos_mode == "rope":
        if q.shape[2] != dh or keys.shape[2] != dh:
            raise ValueError("RoPE requires full-width queries and keys (use a shared key basis)")
        q = rope_rotate(q, qpos, rope_theta)
        keys = rope_rotate(keys, kpos, rope_theta)

    scores = q @ keys.transpose(0, 2, 1) / math.sqrt(dh)
    dist = qpos[:, None] - kpos[None, :]
    if pos_mode == "alibi":
        scores = scores - alibi_slopes(h)[:, None, None] * dist[None]
    scores = np.where(dist[None] < 0, -np.inf, scores)
    probs = softmax_rows(scores)
    heads = probs @ values
    out = np.einsum("hnr,hrd->nd", heads, w.wo)
    if counter is not None:
        counter.add("score", h * m * n * keys.shape[2])
        counter.add("mix", h * m * n * w.v_rank)
        counter.add("proj", h * m * w.v_rank * d)
    return out


def prefill(x: np.ndarray, w: AttentionWeights, cache: LayerCache, **kw) -> np.ndarray:
    if cache.seq_len:
        raise ValueError("prefill expects an empty cache")
    return attend(x, w, cache, **kw)


def decode_step(x_t: np.ndarray, w: AttentionWeights, cache: LayerCache, **kw) -> np.ndarray:
    x_t = np.atleast_2d(x_t)
    if x_t.shape[0] != 1:
        raise ValueError(f"decode_step takes one token, got {x_t.shape[0]}")
    return attend(x_t, w, cache, **kw)


def reference_attention(x: np.ndarray, w: AttentionWeights, pos_mode: str = "learned",
                        rope_theta: float = 10000.0) -> np.ndarray:
    """Loop-based O(n^2 d) causal attention used as an independent oracle."""
    n, d = x.shape
    h, dh = w.n_heads, w.d_head
    slopes = alibi_slopes(h)
    out = np.zeros((n, d))
    for i in range(h):
        q = x @ w.wq[i]
        k = x @ w.wk[i]
        if w.key_unproject is not None:
            k = k @ w.key_unproject
        v = x @ w.wv[i]
        for t in range(n):
            qt = q[t]
            if pos_mode == "rope":
                qt = qt @ rope_matrix(t, dh, rope_theta)
            s = np.empty(t + 1)
            for j in range(t + 1):
                kj = k[j] @ rope_matrix(j, dh, rope_theta) if pos_mode == "rope" else k[j]
                s[j] = float(np.dot(qt, kj)) / math.sqrt(dh)
                if pos_mode == "alibi":
                    s[j] -= slopes[i] * (t - j)
            p = np.exp(s - s.max())
            p /= p.sum()
            out[t] += (p @ v[: t + 1]) @ w.wo[i]
    return out
