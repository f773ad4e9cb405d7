import math

import numpy as np
import pytest
import torch

from eigenattn.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_header, save_checkpoint
from eigenattn.data import CharTokenizer, calibration_sequences, split_tokens
from eigenattn.model import ModelSpec, decode, forward, init_model, perplexity, windows
from eigenattn.training import _to_params, torch_forward, train_tiny

from conftest import small_spec


@pytest.mark.parametrize("mode", ["learned", "alibi", "rope"])
def test_init_is_deterministic(mode):
    a = init_model(small_spec(16, mode), seed=3)
    b = init_model(small_spec(16, mode), seed=3)
    toks = np.arange(10) % 16
    assert np.array_equal(forward(a, toks), forward(b, toks))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(vocab_size=10, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelSpec(vocab_size=10, pos_mode="abs")
    with pytest.raises(ValueError):
        ModelSpec(vocab_size=0)


def test_uniform_logits_perplexity_equals_vocab():
    w = init_model(small_spec(16), seed=0)
    w.head[:] = 0.0
    toks = np.random.default_rng(0).integers(0, 16, size=200)
    assert perplexity(w, toks) == pytest.approx(16.0, abs=1e-9)


def test_perplexity_invariant_to_vocab_permutation():
    w = init_model(small_spec(16), seed=0)
    toks = np.random.default_rng(0).integers(0, 16, size=150)
    perm = np.random.default_rng(1).permutation(16)
    p = w.copy()
    p.tok_emb = w.tok_emb[np.argsort(perm)]
    p.head = w.head[:, np.argsort(perm)]
    # token t is renamed perm[t]; row perm[t] of the new table is row t of the old one
    assert perplexity(p, perm[toks]) == pytest.approx(perplexity(w, toks), rel=1e-10)


def test_perplexity_needs_two_tokens():
    with pytest.raises(ValueError):
        perplexity(init_model(small_spec(16), 0), [1])


def test_windows_cover_tokens():
    ws = windows(np.arange(10), 4)
    assert [w.tolist() for w in ws] == [[0, 1, 2, 3, 4], [4, 5, 6, 7, 8], [8, 9]]


@pytest.mark.parametrize("mode", ["learned", "alibi", "rope"])
def test_decode_matches_forward(mode):
    w = init_model(small_spec(16, mode), seed=2)
    toks = np.random.default_rng(0).integers(0, 16, size=20)
    assert np.max(np.abs(decode(w, toks) - forward(w, toks))) < 1e-9


@pytest.mark.parametrize("mode", ["learned", "alibi", "rope"])
def test_torch_mirror_matches_numpy(mode):
    w = init_model(small_spec(16, mode), seed=2)
    toks = np.random.default_rng(0).integers(0, 16, size=(2, 24))
    with torch.no_grad():
        t = torch_forward(_to_params(w), w.spec, torch.from_numpy(toks)).double().numpy()
    ref = np.stack([forward(w, s) for s in toks])
    assert np.max(np.abs(t - ref)) < 1e-4


def test_train_zero_steps_returns_unchanged_copy():
    w = init_model(small_spec(16), seed=0)
    out, curve = train_tiny(w, np.arange(500) % 16, 0)
    assert curve == [] and out is not w
    assert np.array_equal(out.head, w.head)


def test_training_is_deterministic_and_lowers_loss(corpus):
    tok, split = corpus
    w = init_model(small_spec(tok.size), seed=0)
    a, ca = train_tiny(w, split.train, 30, seed=5)
    b, cb = train_tiny(w, split.train, 30, seed=5)
    assert ca == cb and np.array_equal(a.head, b.head)
    assert np.mean(ca[-5:]) < ca[0]
    assert a.meta["train_steps"] == 30


def test_training_rejects_short_corpus():
    with pytest.raises(ValueError):
        train_tiny(init_model(small_spec(16), 0), np.arange(10), 3)


def test_tokenizer_round_trip():
    tok = CharTokenizer.from_text("hello world")
    assert tok.decode(tok.encode("low hero")) == "low hero"
    with pytest.raises(ValueError, match="'z'"):
        tok.encode("z")


def test_split_is_contiguous():
    s = split_tokens(np.arange(100))
    assert len(s.train) == 80 and len(s.calib) == 10 and len(s.heldout) == 10
    assert np.array_equal(np.concatenate([s.train, s.calib, s.heldout]), np.arange(100))


def test_calibration_sequences():
    seqs = calibration_sequences(np.arange(100), 3, 8)
    assert seqs.shape == (3, 8) and seqs[1, 0] == 8
    with pytest.raises(ValueError, match="needs 800 tokens"):
        calibration_sequences(np.arange(100), 100, 8)


@pytest.mark.parametrize("mode", ["learned", "rope"])
def test_checkpoint_round_trip(tmp_path, mode):
    w = init_model(small_spec(16, mode), seed=4)
    w.meta = {"note": "x"}
    path = save_checkpoint(tmp_path / "m.ckpt", w, vocab="abc")
    assert path.read_bytes()[:8] == MAGIC
    back, header = load_checkpoint(path)
    assert header["vocab"] == "abc" and header["pos_mode"] == mode and back.meta == {"note": "x"}
    toks = np.arange(12) % 16
    # float32 storage bounds the logit drift
    assert np.max(np.abs(forward(back, toks) - forward(w, toks))) < 1e-4
    assert back.spec == w.spec


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        read_header(p)


def test_checkpoint_detects_truncation(tmp_path):
    w = init_model(small_spec(16), seed=4)
    p = save_checkpoint(tmp_path / "m.ckpt", w)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_perplexity_of_trained_model_is_finite(small_trained, corpus):
    _, split = corpus
    for w in small_trained.values():
        ppl = perplexity(w, split.heldout, max_windows=4)
        assert math.isfinite(ppl) and 1 < ppl < w.spec.vocab_size
