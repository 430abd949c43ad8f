import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nmtfidelity.data import SentencePair, Vocab, copy_task, encode_corpus, toy_tokens  # noqa: E402
from nmtfidelity.nmt import NmtTrainConfig, make_model, train_nmt  # noqa: E402


@pytest.fixture(scope="session")
def toy_vocab():
    return Vocab.from_tokens(toy_tokens(50))


@pytest.fixture(scope="session")
def tiny_models(toy_vocab):
    """Untrained small models of both kinds; generic random weights."""
    return {kind: make_model(kind, toy_vocab, toy_vocab, emb_dim=16, hidden_dim=24, seed=5)
            for kind in ("rnn-search", "transformer")}


@pytest.fixture(scope="session")
def sample_pairs(toy_vocab):
    return encode_corpus(copy_task(12, seed=9, noise=0.3), toy_vocab, toy_vocab, 10)


@pytest.fixture(scope="session")
def copy_model(toy_vocab):
    """Transformer trained on the noise-free copy task, with its held-out pairs."""
    pairs = encode_corpus(copy_task(3000, seed=11), toy_vocab, toy_vocab, 10)
    train, test = pairs[:2700], pairs[2700:]
    model = train_nmt(train, toy_vocab, toy_vocab,
                      NmtTrainConfig(kind="transformer", epochs=8, lr=3e-3, seed=0))
    return model, test


def pair(x, y):
    return SentencePair(tuple(x), tuple(y))


# ---- acceptance summary ------------------------------------------------------
# tests/test_acceptance.py records one verdict line per criterion as a user
# property; they are repeated at the end of the run so they survive -q and
# output capture.

_ACCEPTANCE: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _ACCEPTANCE.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
