"""Tiny-model training with torch; weights round-trip through numpy float64."""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .attention import AttentionWeights, alibi_slopes
from .model import LN_EPS, DecoderLayer, TransformerWeights


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


@contextmanager
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _to_params(w: TransformerWeights) -> dict[str, torch.Tensor]:
    p = {"tok_emb": w.tok_emb, "lnf_g": w.lnf_g, "lnf_b": w.lnf_b, "head": w.head}
    if w.pos_emb is not None:
        p["pos_emb"] = w.pos_emb
    for i, layer in enumerate(w.layers):
        if not layer.attn.is_full_rank:
            raise ValueError("training expects an uncompressed model")
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            p[f"{i}.{name}"] = getattr(layer, name)
        for name, t in layer.attn.tensors().items():
            p[f"{i}.{name}"] = t
    return {k: torch.tensor(v, dtype=torch.float32, requires_grad=True) for k, v in p.items()}


def _from_params(w: TransformerWeights, p: dict[str, torch.Tensor]) -> TransformerWeights:
    def a(name):
        return p[name].detach().numpy().astype(np.float64)

    layers = []
    for i in range(len(w.layers)):
        attn = AttentionWeights(a(f"{i}.wq"), a(f"{i}.wk"), a(f"{i}.wv"), a(f"{i}.wo"))
        layers.append(DecoderLayer(
            a(f"{i}.ln1_g"), a(f"{i}.ln1_b"), attn, a(f"{i}.ln2_g"), a(f"{i}.ln2_b"),
            a(f"{i}.w1"), a(f"{i}.b1"), a(f"{i}.w2"), a(f"{i}.b2")))
    return TransformerWeights(w.spec, a("tok_emb"), a("pos_emb") if "pos_emb" in p else None,
                              layers, a("lnf_g"), a("lnf_b"), a("head"), dict(w.meta))


def _rope(x: torch.Tensor, theta: float) -> torch.Tensor:
    n, dim = x.shape[-2], x.shape[-1]
    inv = 1.0 / theta ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    ang = torch.arange(n, dtype=torch.float64)[:, None] * inv[None]
    cos, sin = torch.cos(ang).to(x.dtype), torch.sin(ang).to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1).flatten(-2)


def torch_forward(p: dict[str, torch.Tensor], spec, tokens: torch.Tensor) -> torch.Tensor:
    """Batched logits (B, n, V); mirrors :func:`eigenattn.model.forward`."""
    b, n = tokens.shape
    x = p["tok_emb"][tokens]
    if spec.pos_mode == "learned":
        x = x + p["pos_emb"][:n]
    dist = torch.arange(n)[:, None] - torch.arange(n)[None, :]
    mask = dist < 0
    bias = None
    if spec.pos_mode == "alibi":
        slopes = torch.tensor(alibi_slopes(spec.n_heads), dtype=x.dtype)
        bias = -slopes[:, None, None] * dist[None].to(x.dtype)
    for i in range(spec.n_layers):
        a = F.layer_norm(x, (spec.d_model,), p[f"{i}.ln1_g"], p[f"{i}.ln1_b"], LN_EPS)
        q = torch.einsum("bnd,hdr->bhnr", a, p[f"{i}.wq"])
        k = torch.einsum("bnd,hdr->bhnr", a, p[f"{i}.wk"])
        v = torch.einsum("bnd,hdr->bhnr", a, p[f"{i}.wv"])
        if spec.pos_mode == "rope":
            q, k = _rope(q, spec.rope_theta), _rope(k, spec.rope_theta)
        s = q @ k.transpose(-1, -2) / math.sqrt(spec.d_head)
        if bias is not None:
            s = s + bias
        s = s.masked_fill(mask, float("-inf"))
        heads = torch.softmax(s, dim=-1) @ v
        x = x + torch.einsum("bhnr,hrd->bnd", heads, p[f"{i}.wo"])
        f = F.layer_norm(x, (spec.d_model,), p[f"{i}.ln2_g"], p[f"{i}.ln2_b"], LN_EPS)
        x = x + F.gelu(f @ p[f"{i}.w1"] + p[f"{i}.b1"], approximate="tanh") @ p[f"{i}.w2"] + p[f"{i}.b2"]
    x = F.layer_norm(x, (spec.d_model,), p["lnf_g"], p["lnf_b"], LN_EPS)
    return x @ p["head"]


def train_tiny(weights: TransformerWeights, tokens: np.ndarray, steps: int, *, seed: int = 0,
               lr: float = 3e-3, batch_size: int = 16, seq_len: Optional[int] = None,
               log_every: int = 0) -> tuple[TransformerWeights, list[float]]:
    """Adam on random windows of ``tokens``; returns new weights and the per-step loss curve.

    Window offsets come from ``numpy.random.default_rng(seed)`` and torch runs
    single-threaded, so the loss curve is reproducible.
    """
    if steps <= 0:
        return weights.copy(), []
    spec = weights.spec
    seq_len = min(seq_len or spec.max_seq, spec.max_seq)
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < seq_len + 2:
        raise ValueError(f"corpus of {len(tokens)} tokens too short for windows of {seq_len}")
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    with _single_thread():
        p = _to_params(weights)
        opt = torch.optim.Adam(p.values(), lr=lr)
        for step in range(steps):
            starts = rng.integers(0, len(tokens) - seq_len - 1, size=batch_size)
            batch = np.stack([tokens[s:s + seq_len + 1] for s in starts])
            xb = torch.from_numpy(batch[:, :-1])
            yb = torch.from_numpy(batch[:, 1:])
            logits = torch_forward(p, spec, xb)
            loss = F.cross_entropy(logits.reshape(-1, spec.vocab_size), yb.reshape(-1))
            val = float(loss.item())
            if not math.isfinite(val):
                raise TrainingDiverged(step, val)
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(val)
            if log_every and step % log_every == 0:
                print(f"step {step:5d}  loss {val:.4f}")
        out = _from_params(weights, p)
    out.meta = {**weights.meta, "train_steps": weights.meta.get("train_steps", 0) + steps,
                "train_seed": seed, "lr": lr}
    return out, curve
