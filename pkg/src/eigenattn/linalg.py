"""Dense float64 matrix helpers: SVD with a fixed sign convention, truncation, softmax."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SvdError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.vt.shape[1]


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.size == 0:
        raise ValueError("matrix is empty")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"matrix of shape {m.shape} has non-finite entries")
    return m


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of every left singular vector made non-negative.
    k = min(u.shape[1], vt.shape[0])
    idx = np.argmax(np.abs(u[:, :k]), axis=0)
    signs = np.sign(u[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    u = u.copy()
    vt = vt.copy()
    u[:, :k] *= signs
    vt[:k] *= signs[:, None]
    return u, vt


def svd(a, full_matrices: bool = True) -> SvdResult:
    """Singular value decomposition ``a = u @ diag(s) @ vt``.

    Singular values come back non-increasing. Signs are fixed so that the
    largest-magnitude entry of each left singular vector is non-negative,
    which makes every downstream basis deterministic.
    """
    m = as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=full_matrices)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge for matrix of shape {m.shape}") from exc
    u, vt = _fix_signs(u, vt)
    return SvdResult(u=u, singular_values=s, vt=vt)


def low_rank_reconstruct(s: SvdResult, k: int) -> np.ndarray:
    """Rank-``k`` truncation ``sum_{i<k} sigma_i u_i v_i^T``."""
    n_sv = len(s.singular_values)
    if not 1 <= k <= n_sv:
        raise ValueError(f"rank k={k} outside [1, {n_sv}]")
    return (s.u[:, :k] * s.singular_values[:k]) @ s.vt[:k]


def reconstruct(s: SvdResult) -> np.ndarray:
    return low_rank_reconstruct(s, len(s.singular_values))


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilised by subtracting the row max.

    ``-inf`` entries (masked positions) get zero weight.
    """
    a = np.asarray(a, dtype=np.float64)
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def frobenius(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def orthogonality_error(u) -> float:
    """Max-abs deviation of ``u^T u`` from the identity."""
    u = np.asarray(u, dtype=np.float64)
    return float(np.max(np.abs(u.T @ u - np.eye(u.shape[1]))))


def relative_error(approx, exact) -> float:
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.linalg.norm(exact)
    return float(np.linalg.norm(np.asarray(approx) - exact) / denom) if denom else 0.0
