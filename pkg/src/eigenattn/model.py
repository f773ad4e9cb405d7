"""A small pre-norm decoder-only transformer evaluated in float64 numpy.

Training lives in :mod:`eigenattn.training` (torch); everything else here is
inference: embedding, decoder blocks with an explicit KV cache, LM head and
perplexity.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attention import POS_MODES, AttentionWeights, FlopCounter, KvCache, KvTransform, LayerCache, attend

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 256
    max_seq: int = 64
    pos_mode: str = "learned"
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ffn", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.pos_mode not in POS_MODES:
            raise ValueError(f"unknown pos_mode {self.pos_mode!r}")
        if self.pos_mode == "rope" and self.d_head % 2:
            raise ValueError("RoPE needs an even head width")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderLayer:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    attn: AttentionWeights
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class TransformerWeights:
    spec: ModelSpec
    tok_emb: np.ndarray
    pos_emb: Optional[np.ndarray]
    layers: list[DecoderLayer]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    head: np.ndarray
    meta: dict = field(default_factory=dict)

    def copy(self) -> "TransformerWeights":
        return copy.deepcopy(self)

    @property
    def attention_layers(self) -> list[AttentionWeights]:
        return [layer.attn for layer in self.layers]

    def kv_ranks(self) -> list[tuple[int, int]]:
        return [(a.k_rank, a.v_rank) for a in self.attention_layers]

    @property
    def is_compressed(self) -> bool:
        return not all(a.is_full_rank for a in self.attention_layers)

    def new_cache(self, precision_bits: int = 16) -> KvCache:
        return KvCache.for_layers(self.attention_layers, precision_bits)


def init_model(spec: ModelSpec, seed: int = 0) -> TransformerWeights:
    """Deterministic initialisation from ``numpy.random.default_rng(seed)``.

    Embeddings ~ N(0, 0.02^2); each projection ~ N(0, 1/fan_in); residual
    output projections additionally scaled by 1/sqrt(2 * n_layers).
    Norm gains are 1 and all biases 0.
    """
    rng = np.random.default_rng(seed)
    d, h, f = spec.d_model, spec.n_heads, spec.d_ffn
    dh = spec.d_head
    res_scale = 1.0 / math.sqrt(2 * spec.n_layers)

    def normal(shape, std):
        return rng.standard_normal(shape) * std

    tok_emb = normal((spec.vocab_size, d), 0.02)
    pos_emb = normal((spec.max_seq, d), 0.02) if spec.pos_mode == "learned" else None
    layers = []
    for _ in range(spec.n_layers):
        attn = AttentionWeights(
            wq=normal((h, d, dh), 1 / math.sqrt(d)),
            wk=normal((h, d, dh), 1 / math.sqrt(d)),
            wv=normal((h, d, dh), 1 / math.sqrt(d)),
            wo=normal((h, dh, d), res_scale / math.sqrt(d)),
        )
        layers.append(DecoderLayer(
            ln1_g=np.ones(d), ln1_b=np.zeros(d), attn=attn,
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            w1=normal((d, f), 1 / math.sqrt(d)), b1=np.zeros(f),
            w2=normal((f, d), res_scale / math.sqrt(f)), b2=np.zeros(d),
        ))
    head = normal((d, spec.vocab_size), 1 / math.sqrt(d))
    return TransformerWeights(spec, tok_emb, pos_emb, layers, np.ones(d), np.zeros(d), head)


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def embed(weights: TransformerWeights, tokens, start: int = 0) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    spec = weights.spec
    if tokens.ndim != 1:
        raise ValueError("expected a 1-D token sequence")
    if start + len(tokens) > spec.max_seq:
        raise ValueError(f"sequence of {start + len(tokens)} exceeds max_seq={spec.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.vocab_size):
        raise ValueError("token id outside vocabulary")
    x = weights.tok_emb[tokens]
    if weights.pos_emb is not None:
        x = x + weights.pos_emb[start:start + len(tokens)]
    return x


def block_forward(layer: DecoderLayer, x: np.ndarray, cache: LayerCache, spec: ModelSpec,
                  counter: Optional[FlopCounter] = None, kv_transform: Optional[KvTransform] = None,
                  capture: Optional[dict] = None) -> np.ndarray:
    a = layer_norm(x, layer.ln1_g, layer.ln1_b)
    x = x + attend(a, layer.attn, cache, pos_mode=spec.pos_mode, rope_theta=spec.rope_theta,
                   counter=counter, kv_transform=kv_transform, capture=capture)
    f = layer_norm(x, layer.ln2_g, layer.ln2_b)
    return x + gelu(f @ layer.w1 + layer.b1) @ layer.w2 + layer.b2


def logits_from_hidden(weights: TransformerWeights, x: np.ndarray) -> np.ndarray:
    return layer_norm(x, weights.lnf_g, weights.lnf_b) @ weights.head


def forward(weights: TransformerWeights, tokens, cache: Optional[KvCache] = None,
            kv_transform: Optional[KvTransform] = None,
            counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Logits for ``tokens`` appended after whatever ``cache`` already holds.

    With no cache a fresh one is used (a plain prefill).
    """
    if cache is None:
        cache = weights.new_cache()
    x = embed(weights, tokens, start=cache.seq_len)
    for layer, lc in zip(weights.layers, cache.layers):
        x = block_forward(layer, x, lc, weights.spec, counter=counter, kv_transform=kv_transform)
    return logits_from_hidden(weights, x)


def decode(weights: TransformerWeights, tokens) -> np.ndarray:
    """Token-by-token logits through the cache; row t matches ``forward(tokens)[t]``."""
    cache = weights.new_cache()
    return np.concatenate([forward(weights, [t], cache) for t in tokens], axis=0)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_nll(weights: TransformerWeights, tokens, kv_transform: Optional[KvTransform] = None
                 ) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and the number of predictions."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logp = log_softmax(forward(weights, tokens[:-1], kv_transform=kv_transform))
    return float(-logp[np.arange(len(tokens) - 1), tokens[1:]].sum()), len(tokens) - 1


def windows(tokens, length: int) -> list[np.ndarray]:
    """Non-overlapping windows of ``length + 1`` tokens (the +1 supplies the last target)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = [tokens[i:i + length + 1] for i in range(0, len(tokens) - 1, length)]
    return [w for w in out if len(w) >= 2]


def perplexity(weights: TransformerWeights, tokens, kv_transform: Optional[KvTransform] = None,
               max_windows: Optional[int] = None) -> float:
    """exp(mean next-token cross-entropy) over causal windows of ``max_seq`` tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    total, count = 0.0, 0
    for w in windows(tokens, weights.spec.max_seq)[:max_windows]:
        nll, n = sequence_nll(weights, w, kv_transform)
        total += nll
        count += n
    return math.exp(total / count)


def run_block(layer: DecoderLayer, xs: np.ndarray, spec: ModelSpec, capture: bool = False):
    """Apply one decoder block to a batch of independent sequences ``xs`` (S, n, d).

    Returns the outputs, plus stacked per-head pre-rotation ``q, k, v``
    activations (each S x h x n x r) when ``capture`` is set.
    """
    outs, caps = [], []
    for x in xs:
        cap = {} if capture else None
        lc = LayerCache(layer.attn.n_heads, layer.attn.k_rank, layer.attn.v_rank)
        outs.append(block_forward(layer, x, lc, spec, capture=cap))
        caps.append(cap)
    out = np.stack(outs)
    if not capture:
        return out
    return out, {k: np.stack([c[k] for c in caps]) for k in ("q", "k", "v")}


def embed_batch(weights: TransformerWeights, seqs) -> np.ndarray:
    return np.stack([embed(weights, s) for s in np.asarray(seqs)])
