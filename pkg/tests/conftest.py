import numpy as np
import pytest

from eigenattn.data import CharTokenizer, calibration_sequences, read_corpus, split_tokens
from eigenattn.model import ModelSpec, init_model
from eigenattn.training import train_tiny

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    text = read_corpus()
    tok = CharTokenizer.from_text(text)
    return tok, split_tokens(tok.encode(text))


def small_spec(vocab, pos_mode="learned", **kw):
    base = dict(vocab_size=vocab, d_model=32, n_heads=4, n_layers=2, d_ffn=64, max_seq=64, pos_mode=pos_mode)
    base.update(kw)
    return ModelSpec(**base)


@pytest.fixture(scope="session")
def small_trained(corpus):
    """Briefly trained d=32 models, one per position mode."""
    tok, split = corpus
    out = {}
    for mode in ("learned", "alibi", "rope"):
        w, _ = train_tiny(init_model(small_spec(tok.size, mode), seed=1), split.train, 80, seed=1)
        out[mode] = w
    return out


@pytest.fixture(scope="session")
def calib(corpus):
    _, split = corpus
    return calibration_sequences(split.calib, 8, 64)


@pytest.fixture(scope="session")
def trained_d128(corpus):
    """The d=128, h=4, L=4 learned-position model (seed 0, 300 Adam steps)."""
    tok, split = corpus
    spec = ModelSpec(vocab_size=tok.size, d_model=128, n_heads=4, n_layers=4, d_ffn=512, max_seq=64)
    w0 = init_model(spec, seed=0)
    w, curve = train_tiny(w0, split.train, 300, seed=0)
    return w0, w, curve


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
