"""Calibration representations and energy-thresholded eigenbases.

Representation matrices stack activations with token positions as rows and
head dimensions as columns, so a basis for a head lives in ``d_head`` space
and is given by the leading right singular vectors of the stacked matrix.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .linalg import SvdError, svd
from .model import TransformerWeights, embed_batch, run_block


@dataclass
class LayerRepresentations:
    """Stacked ``(h, rows, d_head)`` query/key/value activations for one layer."""

    r_q: np.ndarray
    r_k: np.ndarray
    r_v: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.r_k.shape[0]

    @property
    def d_head(self) -> int:
        return self.r_k.shape[2]

    @property
    def rows(self) -> int:
        return self.r_k.shape[1]

    def r_kq(self) -> np.ndarray:
        return np.concatenate([self.r_q, self.r_k], axis=1)


@dataclass
class RepresentationSet:
    layers: list[LayerRepresentations]
    n_samples: int
    seq_len: int
    averaging_factor: int = 1


def stack_blocks(q: np.ndarray, k: np.ndarray, v: np.ndarray, averaging_factor: int = 1
                 ) -> LayerRepresentations:
    """Stack per-sample ``(S, h, n, r)`` activations into ``(h, S/a * n, r)`` matrices.

    With ``averaging_factor`` a > 1 each run of ``a`` consecutive samples is
    averaged element-wise before stacking.
    """
    s, h, n, _ = k.shape
    a = averaging_factor
    if a < 1 or s % a:
        raise ValueError(f"averaging factor {a} must divide n_samples={s}")

    def stack(t):
        t = t.reshape(s // a, a, h, n, t.shape[-1]).mean(axis=1)
        return np.ascontiguousarray(t.transpose(1, 0, 2, 3).reshape(h, (s // a) * n, t.shape[-1]))

    return LayerRepresentations(stack(q), stack(k), stack(v))


def choose_averaging(n_samples: int, seq_len: int, averaging_factor: int, max_rows: Optional[int]) -> int:
    """Double the averaging factor until the stacked row count fits ``max_rows``."""
    a = averaging_factor
    while max_rows is not None and (n_samples // a) * seq_len > max_rows:
        if n_samples % (2 * a):
            break
        a *= 2
    return a


def collect_representations(weights: TransformerWeights, sequences, averaging_factor: int = 1,
                            max_rows: Optional[int] = None) -> RepresentationSet:
    """Forward calibration ``sequences`` (n_s x n token ids) and stack Q/K/V per layer and head."""
    seqs = np.asarray(sequences, dtype=np.int64)
    if seqs.ndim != 2 or not len(seqs):
        raise ValueError("sequences must be a non-empty (n_samples, seq_len) array")
    n_s, n = seqs.shape
    a = choose_averaging(n_s, n, averaging_factor, max_rows)
    x = embed_batch(weights, seqs)
    layers = []
    for layer in weights.layers:
        x, cap = run_block(layer, x, weights.spec, capture=True)
        layers.append(stack_blocks(cap["q"], cap["k"], cap["v"], a))
    return RepresentationSet(layers, n_samples=n_s, seq_len=n, averaging_factor=a)


def rank_for_threshold(singular_values, eps_th: float) -> int:
    """Smallest r with ``sum_{i<=r} s_i^2 >= eps_th * sum_i s_i^2``.

    The comparison is exact: energies are summed as rationals and ``eps_th``
    is taken as the decimal it prints as, so 0.9 means nine tenths and ties
    on the boundary resolve the same way on every platform.
    """
    if not 0 < eps_th <= 1:
        raise ValueError(f"eps_th={eps_th} outside (0, 1]")
    energy = [Fraction(float(s)) ** 2 for s in np.asarray(singular_values, dtype=np.float64).ravel()]
    total = sum(energy, Fraction(0))
    if total == 0:
        return 0
    need = Fraction(repr(float(eps_th))) * total
    acc = Fraction(0)
    for r, e in enumerate(energy, start=1):
        acc += e
        if acc >= need:
            return r
    return len(energy)


def cumulative_energy(singular_values) -> np.ndarray:
    e = np.asarray(singular_values, dtype=np.float64) ** 2
    total = e.sum()
    if total == 0:
        return np.ones_like(e)
    c = np.cumsum(e) / total
    c[-1] = 1.0
    return c


def _right_basis(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Left singular vectors of R^T span the d_head row space of R.
    res = svd(r.T, full_matrices=False)
    return res.u, res.singular_values


@dataclass
class LayerSpectra:
    """Full SVD factors for one layer, truncated on demand for any threshold."""

    u_k: np.ndarray         # (h, d_head, d_head), or (1, ...) when shared
    s_k: np.ndarray         # (h, d_head) or (1, d_head)
    u_v: np.ndarray
    s_v: np.ndarray
    shared: bool

    @classmethod
    def from_representations(cls, reps: LayerRepresentations, share_key_basis: bool = False,
                             layer: int = 0) -> "LayerSpectra":
        def factor(mats):
            us, ss = [], []
            for i, m in enumerate(mats):
                try:
                    u, s = _right_basis(m)
                except SvdError as exc:
                    raise SvdError(f"layer {layer}, head {i}: {exc}") from exc
                us.append(u)
                ss.append(np.pad(s, (0, u.shape[1] - len(s))))
            return np.stack(us), np.stack(ss)

        r_kq = reps.r_kq()
        kq_mats = [r_kq.reshape(-1, reps.d_head)] if share_key_basis else list(r_kq)
        u_k, s_k = factor(kq_mats)
        u_v, s_v = factor(list(reps.r_v))
        return cls(u_k, s_k, u_v, s_v, share_key_basis)

    @property
    def d_head(self) -> int:
        return self.u_v.shape[1]

    def head_ranks(self, eps_th: float) -> tuple[list[int], list[int]]:
        rk = [max(1, rank_for_threshold(s, eps_th)) for s in self.s_k]
        rv = [max(1, rank_for_threshold(s, eps_th)) for s in self.s_v]
        return rk, rv

    def basis(self, eps_th: float, n_heads: Optional[int] = None) -> "LayerBasis":
        rk, rv = self.head_ranks(eps_th)
        r_k, r_v = max(rk), max(rv)
        u_k = self.u_k[:, :, :r_k]
        if self.shared:
            u_k = np.repeat(u_k, n_heads or self.u_v.shape[0], axis=0)
        return LayerBasis(u_k=u_k, u_v=self.u_v[:, :, :r_v], eps_th=eps_th, shared=self.shared,
                          head_ranks_k=rk, head_ranks_v=rv)


@dataclass
class LayerBasis:
    u_k: np.ndarray   # (h, d_head, r_k); identical across heads when shared
    u_v: np.ndarray   # (h, d_head, r_v)
    eps_th: float
    shared: bool = False
    head_ranks_k: list[int] = field(default_factory=list)
    head_ranks_v: list[int] = field(default_factory=list)

    @property
    def r_k(self) -> int:
        return self.u_k.shape[2]

    @property
    def r_v(self) -> int:
        return self.u_v.shape[2]


@dataclass
class EigenBasis:
    layers: list[LayerBasis]

    @property
    def ranks(self) -> list[tuple[int, int]]:
        return [(b.r_k, b.r_v) for b in self.layers]


def build_basis(reps: RepresentationSet, eps_th_per_layer: float | Sequence[float],
                share_key_basis: bool = False) -> EigenBasis:
    """Per-layer bases at the given thresholds, widened to the max rank over heads."""
    n_layers = len(reps.layers)
    if np.isscalar(eps_th_per_layer):
        eps = [float(eps_th_per_layer)] * n_layers
    else:
        eps = [float(e) for e in eps_th_per_layer]
    if len(eps) != n_layers:
        raise ValueError(f"need {n_layers} thresholds, got {len(eps)}")
    out = []
    for l, (lr, e) in enumerate(zip(reps.layers, eps)):
        spectra = LayerSpectra.from_representations(lr, share_key_basis, layer=l)
        out.append(spectra.basis(e, lr.n_heads))
    return EigenBasis(out)


def spectrum_report(reps: RepresentationSet, energy: float = 0.9) -> tuple[list[dict], list[dict]]:
    """Normalised cumulative energy curves and the rank reaching ``energy``.

    Returns ``(curve_rows, rank_rows)``; curve rows carry
    ``layer, head, kind, index, cumulative_energy`` with ``kind`` in
    ``kq | k | v`` and a 1-based ``index``.
    """
    curves, ranks = [], []
    for l, lr in enumerate(reps.layers):
        mats = {"kq": lr.r_kq(), "k": lr.r_k, "v": lr.r_v}
        for head in range(lr.n_heads):
            for kind, m in mats.items():
                _, s = _right_basis(m[head])
                c = cumulative_energy(s)
                curves.extend({"layer": l, "head": head, "kind": kind, "index": i + 1,
                               "cumulative_energy": float(v)} for i, v in enumerate(c))
                ranks.append({"layer": l, "head": head, "kind": kind,
                              "rank": rank_for_threshold(s, energy), "d_head": lr.d_head})
    return curves, ranks


def rows_to_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


SPECTRUM_COLUMNS = ("layer", "head", "kind", "index", "cumulative_energy")
