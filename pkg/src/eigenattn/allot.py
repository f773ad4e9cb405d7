"""Layer-wise threshold search under a relative output-error budget.

Layers are processed in order. For each layer the threshold starts at 1.0
(the uncompressed layer) and steps down by ``step_size``; a candidate is
accepted while the decoder-layer output error
``||X' - X||^2 / ||X||^2`` stays within ``error_budget``, and the search stops
at the first candidate that exceeds it. The accepted layer's outputs feed the
next layer, so later layers are calibrated on the compressed prefix.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .basis import LayerSpectra, choose_averaging, rows_to_csv, stack_blocks
from .cost import analytic_costs
from .model import DecoderLayer, TransformerWeights, embed_batch, run_block
from .rewrite import merge_basis, merge_rope_basis


@dataclass(frozen=True)
class AllotmentConfig:
    error_budget: float
    step_size: float = 0.02
    eps_floor: float = 0.02
    share_key_basis: Optional[bool] = None   # None: shared only for RoPE models
    averaging_factor: int = 1
    max_rows: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.step_size < 1:
            raise ValueError("step_size must lie in (0, 1)")
        if self.error_budget < 0:
            raise ValueError("error_budget must be non-negative")
        if self.eps_floor < self.step_size - 1e-12 or self.eps_floor > 1:
            raise ValueError("eps_floor must lie in [step_size, 1]")

    def thresholds(self) -> list[float]:
        """Candidate thresholds 1 - step, 1 - 2 step, ... down to ``eps_floor``."""
        out, k = [], 1
        while True:
            e = round(1.0 - k * self.step_size, 12)
            if e < self.eps_floor - 1e-12:
                return out
            out.append(e)
            k += 1


@dataclass
class LayerAllotment:
    layer: int
    eps_th: float
    r_k: int
    r_v: int
    error: float
    compressed: bool
    tested: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class AllotmentResult:
    layers: list[LayerAllotment]
    d_head: int
    error_budget: float
    step_size: float
    eps_floor: float
    shared_key_basis: bool

    @property
    def ranks(self) -> list[tuple[int, int]]:
        return [(a.r_k, a.r_v) for a in self.layers]

    @property
    def kv_ratio(self) -> float:
        return sum(rk + rv for rk, rv in self.ranks) / (2 * len(self.layers) * self.d_head)

    @property
    def key_compression(self) -> float:
        return 1 - sum(a.r_k for a in self.layers) / (len(self.layers) * self.d_head)

    @property
    def value_compression(self) -> float:
        return 1 - sum(a.r_v for a in self.layers) / (len(self.layers) * self.d_head)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kv_ratio"] = self.kv_ratio
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AllotmentResult":
        layers = [LayerAllotment(**{**a, "tested": [tuple(t) for t in a.get("tested", [])]})
                  for a in d["layers"]]
        return cls(layers, d["d_head"], d["error_budget"], d["step_size"], d["eps_floor"],
                   d["shared_key_basis"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AllotmentResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def relative_error(out: np.ndarray, ref: np.ndarray) -> float:
    return float(np.sum((out - ref) ** 2) / np.sum(ref ** 2))


def allot(weights: TransformerWeights, calib_sequences, cfg: AllotmentConfig
          ) -> tuple[TransformerWeights, AllotmentResult]:
    """Compress ``weights`` layer by layer; returns the compressed copy and the per-layer record."""
    if weights.is_compressed:
        raise ValueError("allotment starts from an uncompressed model")
    spec = weights.spec
    rope = spec.pos_mode == "rope"
    shared = rope if cfg.share_key_basis is None else cfg.share_key_basis
    if rope and not shared:
        raise ValueError("RoPE models need share_key_basis")
    merge = merge_rope_basis if rope else merge_basis
    seqs = np.asarray(calib_sequences, dtype=np.int64)
    a = choose_averaging(len(seqs), seqs.shape[1], cfg.averaging_factor, cfg.max_rows)
    out = weights.copy()
    x = embed_batch(weights, seqs)
    records = []
    for l, layer in enumerate(weights.layers):
        ref, cap = run_block(layer, x, spec, capture=True)
        spectra = LayerSpectra.from_representations(stack_blocks(cap["q"], cap["k"], cap["v"], a), shared, l)
        best = LayerAllotment(l, 1.0, spec.d_head, spec.d_head, 0.0, compressed=False)
        best_layer, best_out = layer, ref
        seen: dict[tuple[int, int], tuple[float, DecoderLayer, np.ndarray]] = {}
        for eps in cfg.thresholds():
            basis = spectra.basis(eps, spec.n_heads)
            key = (basis.r_k, basis.r_v)
            if key not in seen:
                cand = replace(layer, attn=merge(layer.attn, basis))
                cand_out = run_block(cand, x, spec)
                seen[key] = (relative_error(cand_out, ref), cand, cand_out)
            err, cand, cand_out = seen[key]
            best.tested.append((eps, err))
            if err > cfg.error_budget:
                break
            best = LayerAllotment(l, eps, basis.r_k, basis.r_v, err, True, best.tested)
            best_layer, best_out = cand, cand_out
        records.append(best)
        out.layers[l] = best_layer
        x = best_out
    out.meta = {**weights.meta, "eps_th": [r.eps_th for r in records], "error_budget": cfg.error_budget,
                "step_size": cfg.step_size, "shared_key_basis": shared,
                "calibration": {"n_samples": int(len(seqs)), "seq_len": int(seqs.shape[1]),
                                "averaging_factor": a}}
    result = AllotmentResult(records, spec.d_head, cfg.error_budget, cfg.step_size, cfg.eps_floor, shared)
    return out, result


def budget_grid(lo: float = 1e-5, hi: float = 0.5, per_decade: int = 6) -> list[float]:
    """0 followed by log-spaced budgets from ``lo`` to ``hi``."""
    n = int(round(np.log10(hi / lo) * per_decade)) + 1
    return [0.0] + [float(f"{v:.3g}") for v in np.geomspace(lo, hi, n)]


DEFAULT_BUDGET_GRID = tuple(budget_grid())

BUDGET_TABLE_COLUMNS = ("model", "compression", "kv_size_bytes", "e_b")


@dataclass
class TargetingResult:
    config: AllotmentConfig
    achieved_ratio: float
    reached: bool
    table: list[dict]
    model: Optional[TransformerWeights] = None
    result: Optional[AllotmentResult] = None


def compression_targeting(weights: TransformerWeights, calib_sequences, grid: Sequence[float],
                          target_ratio: float, base: Optional[AllotmentConfig] = None,
                          model_name: str = "toy", n_ctx: Optional[int] = None,
                          cache: Optional[dict] = None) -> TargetingResult:
    """Smallest budget on ``grid`` whose allotment reaches a KV ratio <= ``target_ratio``.

    ``table`` lists every evaluated budget as (model, compression, kv_size_bytes, e_b).
    When no budget reaches the target the lowest achieved ratio is returned
    with ``reached=False``. Pass a dict as ``cache`` to reuse allotments
    across several targets.
    """
    base = base or AllotmentConfig(error_budget=0.0)
    cache = {} if cache is None else cache
    n_ctx = n_ctx or weights.spec.max_seq
    table, chosen, best = [], None, None
    for e_b in sorted(grid):
        if e_b not in cache:
            cache[e_b] = allot(weights, calib_sequences, replace(base, error_budget=e_b))
        model, res = cache[e_b]
        costs = analytic_costs(weights.spec.d_model, weights.spec.n_heads, res.ranks, n_ctx)
        table.append({"model": model_name, "compression": round(res.kv_ratio, 4),
                      "kv_size_bytes": costs.kv_bytes, "e_b": e_b})
        if best is None or res.kv_ratio < best[2].kv_ratio - 1e-12:
            best = (e_b, model, res)
        if res.kv_ratio <= target_ratio + 1e-12:
            chosen = (e_b, model, res)
            break
    reached = chosen is not None
    e_b, model, res = chosen or best
    return TargetingResult(replace(base, error_budget=e_b), res.kv_ratio, reached, table, model, res)


RANK_COLUMNS = ("layer", "r_k", "r_v", "eps_th", "error")


def rank_rows(result: AllotmentResult) -> list[dict]:
    return [{"layer": a.layer, "r_k": a.r_k, "r_v": a.r_v, "eps_th": a.eps_th, "error": a.error}
            for a in result.layers]


def rank_visualization(result: AllotmentResult) -> str:
    """CSV of per-layer key/value ranks; the summary line is informational only."""
    return rows_to_csv(rank_rows(result), RANK_COLUMNS)


def rank_summary(result: AllotmentResult) -> str:
    return (f"kv ratio {result.kv_ratio:.3f}; keys compressed by {100 * result.key_compression:.0f}%, "
            f"values by {100 * result.value_compression:.0f}%")
