"""Binary checkpoint container.

Layout::

    b"EIGNCKPT"                      8-byte magic
    uint64 LE                        length of the JSON header in bytes
    header                           UTF-8 JSON
    payload                          little-endian float32 row-major tensors

The header carries ``format_version``, the model spec, the tokenizer vocabulary,
per-layer ``kv_ranks`` and ``pos_mode``, free-form ``meta`` and a tensor
directory of ``{name, shape, offset, nbytes}`` entries with offsets relative to
the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import AttentionWeights
from .model import DecoderLayer, ModelSpec, TransformerWeights

MAGIC = b"EIGNCKPT"
FORMAT_VERSION = 1
_LAYER_FIELDS = ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class CheckpointError(ValueError):
    pass


def _named_tensors(w: TransformerWeights) -> dict[str, np.ndarray]:
    out = {"tok_emb": w.tok_emb}
    if w.pos_emb is not None:
        out["pos_emb"] = w.pos_emb
    for i, layer in enumerate(w.layers):
        for name in _LAYER_FIELDS:
            out[f"layers.{i}.{name}"] = getattr(layer, name)
        for name, t in layer.attn.tensors().items():
            out[f"layers.{i}.attn.{name}"] = t
    out["lnf_g"] = w.lnf_g
    out["lnf_b"] = w.lnf_b
    out["head"] = w.head
    return out


def save_checkpoint(path: str | Path, weights: TransformerWeights, vocab: Optional[str] = None) -> Path:
    path = Path(path)
    tensors = _named_tensors(weights)
    directory, blobs, offset = [], [], 0
    for name, t in tensors.items():
        blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "model_spec": weights.spec.to_dict(),
        "pos_mode": weights.spec.pos_mode,
        "kv_ranks": [list(r) for r in weights.kv_ranks()],
        "compressed": weights.is_compressed,
        "vocab": vocab,
        "meta": weights.meta,
        "tensors": directory,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not an eigenattn checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, 16 + n


def load_checkpoint(path: str | Path) -> tuple[TransformerWeights, dict]:
    """Weights (as float64) and the raw header."""
    header, start = read_header(path)
    data = Path(path).read_bytes()[start:]
    t = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        t[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(entry["shape"])
    spec = ModelSpec(**header["model_spec"])
    layers = []
    for i in range(spec.n_layers):
        p = f"layers.{i}."
        attn = AttentionWeights(t[p + "attn.wq"], t[p + "attn.wk"], t[p + "attn.wv"], t[p + "attn.wo"],
                                t.get(p + "attn.key_unproject"))
        layers.append(DecoderLayer(attn=attn, **{k: t[p + k] for k in _LAYER_FIELDS}))
    w = TransformerWeights(spec, t["tok_emb"], t.get("pos_emb"), layers, t["lnf_g"], t["lnf_b"],
                           t["head"], dict(header.get("meta") or {}))
    if [list(r) for r in w.kv_ranks()] != header["kv_ranks"]:
        raise CheckpointError(f"{path}: kv_ranks in header disagree with tensor shapes")
    return w, header
