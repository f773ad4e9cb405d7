"""Grouped asymmetric integer quantization of KV caches.

Keys are quantized per channel (groups run along the token axis inside a
channel) and values per token (groups run along the channel axis inside a
token). Each group stores a scale and zero-point, counted at 16 bits each.
``bits=16`` is the unquantized passthrough.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .attention import KvCache, KvTransform
from .model import perplexity

AXES = ("channel", "token")
OVERHEAD_BYTES_PER_GROUP = 4  # float16 scale + float16 zero-point
IDENTITY_BITS = 16


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    group_size: int
    axis: str = "channel"

    def __post_init__(self):
        if not (2 <= self.bits <= 8 or self.bits == IDENTITY_BITS):
            raise ValueError(f"bits={self.bits} unsupported (2..8, or 16 for passthrough)")
        if self.group_size < 1:
            raise ValueError("group_size must be positive")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")

    @property
    def identity(self) -> bool:
        return self.bits == IDENTITY_BITS


def key_config(bits: int, group_size: int) -> QuantConfig:
    return QuantConfig(bits, group_size, "channel")


def value_config(bits: int, group_size: int) -> QuantConfig:
    return QuantConfig(bits, group_size, "token")


@dataclass
class QuantizedTensor:
    """Integer codes laid out as (rows, cols) with groups along cols.

    For ``axis="channel"`` rows are channels (the transpose of the input);
    the last group in a row is shorter when ``group_size`` does not divide
    the row length.
    """

    codes: np.ndarray       # uint8 (rows, cols)
    scales: np.ndarray      # (rows, n_groups); 0 marks a constant group
    zeros: np.ndarray       # (rows, n_groups); holds the constant itself when scale == 0
    shape: tuple[int, int]
    config: QuantConfig

    @property
    def n_groups(self) -> int:
        return self.scales.size

    def dequantize(self) -> np.ndarray:
        g = self.config.group_size
        idx = np.arange(self.codes.shape[1]) // g
        s = self.scales[:, idx]
        z = self.zeros[:, idx]
        out = np.where(s == 0, z, (self.codes.astype(np.float64) - z) * s)
        return out.T if self.config.axis == "channel" else out

    def nbytes(self) -> int:
        return math.ceil(self.codes.size * self.config.bits / 8) + OVERHEAD_BYTES_PER_GROUP * self.n_groups

    def to_bytes(self) -> bytes:
        """Bit-packed codes (LSB-first per code) followed by float16 scales and zero-points."""
        bits = self.config.bits
        flat = self.codes.reshape(-1).astype(np.uint8)
        bitplane = ((flat[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
        packed = np.packbits(bitplane.reshape(-1), bitorder="little")
        return (packed.tobytes() + self.scales.astype("<f2").tobytes()
                + self.zeros.astype("<f2").tobytes())


def unpack_codes(raw: bytes, count: int, bits: int) -> np.ndarray:
    planes = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[: count * bits]
    return (planes.reshape(count, bits) << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def quantize(t, cfg: QuantConfig) -> QuantizedTensor:
    """Asymmetric min-max quantization of a (tokens, channels) matrix.

    Per group: ``scale = (max - min) / (2^bits - 1)``, ``zero = round(-min / scale)``,
    ``code = clip(round(x / scale) + zero, 0, 2^bits - 1)``.
    """
    if cfg.identity:
        raise ValueError("16-bit passthrough has no integer encoding")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot quantize non-finite values")
    m = t.T if cfg.axis == "channel" else t
    rows, cols = m.shape
    g = cfg.group_size
    qmax = 2 ** cfg.bits - 1
    n_groups = -(-cols // g)
    codes = np.zeros((rows, cols), dtype=np.uint8)
    scales = np.zeros((rows, n_groups))
    zeros = np.zeros((rows, n_groups))
    for j in range(n_groups):
        block = m[:, j * g:(j + 1) * g]
        lo, hi = block.min(axis=1), block.max(axis=1)
        scale = (hi - lo) / qmax
        const = scale == 0
        safe = np.where(const, 1.0, scale)
        zero = np.round(-lo / safe)
        q = np.clip(np.round(block / safe[:, None]) + zero[:, None], 0, qmax)
        q[const] = 0
        codes[:, j * g:(j + 1) * g] = q.astype(np.uint8)
        scales[:, j] = np.where(const, 0.0, scale)
        zeros[:, j] = np.where(const, lo, zero)
    return QuantizedTensor(codes, scales, zeros, t.shape, cfg)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.dequantize()


def fake_quantize(t, cfg: QuantConfig) -> np.ndarray:
    if cfg.identity:
        return np.asarray(t, dtype=np.float64)
    return quantize(t, cfg).dequantize()


def kv_transform(key_cfg: Optional[QuantConfig], value_cfg: Optional[QuantConfig]) -> Optional[KvTransform]:
    """Quantize-dequantize of cached (h, n, r) keys and values, head by head."""
    if (key_cfg is None or key_cfg.identity) and (value_cfg is None or value_cfg.identity):
        return None

    def apply(keys, values):
        if key_cfg is not None and not key_cfg.identity:
            keys = np.stack([fake_quantize(k, key_cfg) for k in keys])
        if value_cfg is not None and not value_cfg.identity:
            values = np.stack([fake_quantize(v, value_cfg) for v in values])
        return keys, values

    return apply


def matrix_bytes(n_tokens: int, n_channels: int, cfg: Optional[QuantConfig], precision_bits: int = 16) -> int:
    """Encoded size of one (tokens, channels) cache matrix."""
    if cfg is None or cfg.identity:
        return math.ceil(n_tokens * n_channels * precision_bits / 8)
    rows, cols = (n_channels, n_tokens) if cfg.axis == "channel" else (n_tokens, n_channels)
    groups = rows * -(-cols // cfg.group_size)
    return math.ceil(rows * cols * cfg.bits / 8) + OVERHEAD_BYTES_PER_GROUP * groups


def kv_bytes(ranks: Sequence[tuple[int, int]], n_heads: int, n: int, batch: int = 1,
             key_cfg: Optional[QuantConfig] = None, value_cfg: Optional[QuantConfig] = None,
             precision_bits: int = 16) -> int:
    """Bytes of a full KV cache: ``len(ranks)`` layers of ``n_heads`` heads, ``n`` tokens, ``batch`` sequences.

    Counts each per-head key and value matrix separately, including group
    overheads, so the result equals the serialized size of
    :func:`quantize_cache`.
    """
    per_seq = sum(n_heads * (matrix_bytes(n, rk, key_cfg, precision_bits)
                             + matrix_bytes(n, rv, value_cfg, precision_bits)) for rk, rv in ranks)
    return batch * per_seq


def quantize_cache(cache: KvCache, key_cfg: QuantConfig, value_cfg: QuantConfig) -> list[QuantizedTensor]:
    out = []
    for lc in cache.layers:
        out.extend(quantize(k, key_cfg) for k in lc.keys)
        out.extend(quantize(v, value_cfg) for v in lc.values)
    return out


# Precision / group-size pairs of the stacking study, plus the 16-bit reference.
DEFAULT_GRID: tuple[tuple[int, int], ...] = (
    (2, 16), (2, 32), (2, 128), (3, 32), (3, 64), (3, 128), (4, 16), (4, 32), (4, 128), (8, 128),
)

CURVE_COLUMNS = ("family", "bits", "group_size", "kv_bytes", "ppl")


def eval_stacked(models: dict, tokens, grid: Iterable[tuple[int, int]] = DEFAULT_GRID,
                 n: Optional[int] = None, max_windows: Optional[int] = None) -> list[dict]:
    """(kv_bytes, perplexity) for each family in ``models`` at every (bits, group_size).

    ``models`` maps a family name (``standard``, ``eigen``) to weights.
    A 16-bit row per family gives the unquantized reference.
    """
    rows = []
    for family, w in models.items():
        ctx = n or w.spec.max_seq
        for bits, g in [(IDENTITY_BITS, 0), *grid]:
            kc = key_config(bits, max(g, 1))
            vc = value_config(bits, max(g, 1))
            ppl = perplexity(w, tokens, kv_transform=kv_transform(kc, vc), max_windows=max_windows)
            rows.append({"family": family, "bits": bits, "group_size": g,
                         "kv_bytes": kv_bytes(w.kv_ranks(), w.spec.n_heads, ctx, key_cfg=kc, value_cfg=vc),
                         "ppl": ppl})
    return rows
