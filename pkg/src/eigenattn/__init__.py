"""Low-rank eigenbasis attention for KV-cache compression, on a toy decoder model.

Calibration activations are decomposed per layer and head; the leading
singular directions are merged into the Q/K/V/O projections so keys and
values are cached at reduced width. A per-layer error budget picks the ranks.
"""
from .allot import AllotmentConfig, AllotmentResult, allot, compression_targeting
from .attention import AttentionConfig, AttentionWeights, FlopCounter, KvCache, decode_step, prefill
from .basis import EigenBasis, build_basis, collect_representations, rank_for_threshold, spectrum_report
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import analytic_costs, compression_ratio
from .model import ModelSpec, TransformerWeights, forward, init_model, perplexity
from .quant import QuantConfig, dequantize, kv_bytes, quantize
from .rewrite import compress_model, merge_basis, merge_rope_basis

__version__ = "0.1.0"
