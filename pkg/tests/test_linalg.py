import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eigenattn.linalg import (SvdError, low_rank_reconstruct, orthogonality_error, reconstruct, softmax_rows,
                              svd)


def test_svd_identity():
    assert np.allclose(svd(np.eye(3)).singular_values, [1, 1, 1])


def test_svd_diagonal():
    assert np.allclose(svd(np.diag([3.0, 2.0, 1.0])).singular_values, [3, 2, 1])


def test_svd_random_reconstruction(rng):
    a = rng.standard_normal((8, 4))
    s = svd(a)
    assert s.u.shape == (8, 8) and s.vt.shape == (4, 4)
    err = np.linalg.norm(reconstruct(s) - a) / np.linalg.norm(a)
    assert err < 1e-5


def test_svd_sign_convention(rng):
    s = svd(rng.standard_normal((10, 6)))
    k = len(s.singular_values)
    for j in range(k):
        col = s.u[:, j]
        assert col[np.argmax(np.abs(col))] >= 0


def test_svd_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        svd(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_svd_nonconvergence_names_shape(monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("no")

    monkeypatch.setattr(np.linalg, "svd", boom)
    with pytest.raises(SvdError, match=r"\(2, 3\)"):
        svd(np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 256), n=st.integers(1, 64), seed=st.integers(0, 2**31 - 1))
def test_svd_invariants(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    s = svd(a)
    sv = s.singular_values
    assert np.all(np.diff(sv) <= 1e-12) and np.all(sv >= 0)
    assert orthogonality_error(s.u) < 1e-6
    assert orthogonality_error(s.vt.T) < 1e-6
    assert np.linalg.norm(reconstruct(s) - a) / np.linalg.norm(a) < 1e-5


def test_low_rank_full_rank_is_exact(rng):
    a = rng.standard_normal((6, 5))
    assert np.allclose(low_rank_reconstruct(svd(a), 5), a, atol=1e-5)


def test_low_rank_diag_dominant():
    out = low_rank_reconstruct(svd(np.diag([3.0, 2.0, 1.0])), 1)
    assert np.allclose(out, np.diag([3.0, 0, 0]))


def test_low_rank_tail_energy(rng):
    a = rng.standard_normal((16, 8))
    s = svd(a)
    err = np.linalg.norm(low_rank_reconstruct(s, 4) - a)
    tail = math.sqrt(sum(x * x for x in s.singular_values[4:]))
    assert abs(err - tail) / tail < 1e-6


@pytest.mark.parametrize("k", [0, 9])
def test_low_rank_out_of_range(rng, k):
    with pytest.raises(ValueError):
        low_rank_reconstruct(svd(rng.standard_normal((8, 8))), k)


@pytest.mark.parametrize("seed", range(5))
def test_eckart_young_spot_check(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((20, 12))
    k = 3
    best = np.linalg.norm(low_rank_reconstruct(svd(a), k) - a)
    for _ in range(20):
        b, c = rng.standard_normal((20, k)), rng.standard_normal((k, 12))
        # least-squares optimal C for a random left factor is still rank k
        c = np.linalg.lstsq(b, a, rcond=None)[0] if rng.random() < 0.5 else c
        assert best <= np.linalg.norm(b @ c - a) + 1e-12


def test_softmax_symmetric():
    assert np.allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])


def test_softmax_no_overflow():
    out = softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-300


def test_softmax_rows_sum_to_one(rng):
    out = softmax_rows(rng.standard_normal((4, 4)) * 5)
    for row in out:
        assert abs(math.fsum(row) - 1) < 1e-6
