"""Analytic KV-cache size, parameter and generation-FLOP accounting.

Counting convention: one multiply-accumulate is one unit, the convention
under which standard attention costs ``4 d^2 + 2 n d`` per generated token.
Softmax, scaling, masking and rotations are not counted. With distinct
key/value ranks a head of a non-RoPE layer costs::

    kv elements   2 n r            ->  n (r_k + r_v)
    parameters    4 d r            ->  2 d (r_k + r_v)
    generation    4 d r + 2 n r    ->  2 d (r_k + r_v) + n (r_k + r_v)

RoPE layers keep full-width queries, so query projection and score terms
use ``d_head``; lifting cached keys (``n r_k d_head`` per head) is reported
separately as ``lift_flops_per_token``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence


@dataclass(frozen=True)
class LayerCost:
    kv_elements: int
    kv_bytes: float
    attn_params: int
    gen_flops_per_token: int
    lift_flops_per_token: int = 0
    lift_params: int = 0


@dataclass
class CostReport:
    d_model: int
    n_heads: int
    n: int
    batch: int
    precision_bits: int
    rope: bool
    ranks: list[tuple[int, int]]
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def total(self, name: str):
        return sum(getattr(c, name) for c in self.layers)

    @property
    def kv_elements(self) -> int:
        return self.total("kv_elements")

    @property
    def kv_bytes(self) -> float:
        return self.total("kv_bytes")

    @property
    def attn_params(self) -> int:
        return self.total("attn_params")

    @property
    def gen_flops_per_token(self) -> int:
        return self.total("gen_flops_per_token")

    @property
    def lift_flops_per_token(self) -> int:
        return self.total("lift_flops_per_token")

    def ratios(self, baseline: "CostReport") -> dict[str, float]:
        _check_same(self, baseline)
        return {
            "kv": self.kv_bytes / baseline.kv_bytes,
            "params": self.attn_params / baseline.attn_params,
            "gen_flops": self.gen_flops_per_token / baseline.gen_flops_per_token,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranks"] = [list(r) for r in self.ranks]
        d["totals"] = {k: self.total(k) for k in LayerCost.__dataclass_fields__}
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def layer_cost(d_model: int, n_heads: int, r_k: int, r_v: int, n: int, *, batch: int = 1,
               precision_bits: int = 16, rope: bool = False) -> LayerCost:
    d, h = d_model, n_heads
    dh = d // h
    if not (1 <= r_k <= dh and 1 <= r_v <= dh):
        raise ValueError(f"ranks ({r_k}, {r_v}) outside [1, {dh}]")
    r_q = dh if rope else r_k
    r_score = dh if rope else r_k
    kv = batch * n * (r_k + r_v) * h
    lifted = rope and r_k < dh
    return LayerCost(
        kv_elements=kv,
        kv_bytes=kv * precision_bits / 8,
        attn_params=h * d * (r_q + r_k + 2 * r_v),
        gen_flops_per_token=h * (d * (r_q + r_k + 2 * r_v) + n * (r_score + r_v)),
        lift_flops_per_token=h * n * r_k * dh if lifted else 0,
        lift_params=r_k * dh if lifted else 0,
    )


def analytic_costs(d_model: int, n_heads: int, ranks: Sequence[tuple[int, int]], n: int, *,
                   batch: int = 1, precision_bits: int = 16, rope: bool = False) -> CostReport:
    """Per-layer and total costs for key/value ranks ``ranks[l] = (r_k, r_v)``.

    ``n`` is the number of cached positions attended by the generated token
    (including itself).
    """
    layers = [layer_cost(d_model, n_heads, rk, rv, n, batch=batch, precision_bits=precision_bits, rope=rope)
              for rk, rv in ranks]
    return CostReport(d_model, n_heads, n, batch, precision_bits, rope, [tuple(r) for r in ranks], layers)


def standard_costs(d_model: int, n_heads: int, n_layers: int, n: int, **kw) -> CostReport:
    dh = d_model // n_heads
    kw.pop("rope", None)
    return analytic_costs(d_model, n_heads, [(dh, dh)] * n_layers, n, **kw)


def _check_same(a: CostReport, b: CostReport) -> None:
    fields = ("d_model", "n_heads", "n", "batch", "precision_bits", "n_layers")
    diff = [f for f in fields if getattr(a, f) != getattr(b, f)]
    if diff:
        raise ValueError(f"cost reports differ in {diff}")


def compression_ratio(report_eigen: CostReport, report_std: CostReport) -> float:
    """Compressed KV bytes over standard KV bytes."""
    _check_same(report_eigen, report_std)
    return report_eigen.kv_bytes / report_std.kv_bytes


def format_cost_table(eigen: CostReport, std: CostReport) -> str:
    rows = [("KV Cache Size (elements)", std.kv_elements, eigen.kv_elements),
            ("# Parameters", std.attn_params, eigen.attn_params),
            ("FLOPs (generation phase)", std.gen_flops_per_token, eigen.gen_flops_per_token)]
    if eigen.lift_flops_per_token:
        rows.append(("RoPE key lift FLOPs", 0, eigen.lift_flops_per_token))
    w = max(len(r[0]) for r in rows)
    lines = [f"{'':{w}}  {'Standard':>14}  {'Eigen':>14}  {'ratio':>6}"]
    for name, s, e in rows:
        ratio = f"{e / s:6.3f}" if s else "     -"
        lines.append(f"{name:{w}}  {s:>14,}  {e:>14,}  {ratio}")
    return "\n".join(lines)
