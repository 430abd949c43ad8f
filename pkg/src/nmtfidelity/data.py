"""Vocabularies, sentence pairs, decision contexts and corpus files."""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")


class Vocab:
    """Bidirectional token/id map. Ids 0-3 are PAD, UNK, BOS, EOS."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        return cls(tokens)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str], eos: bool = True) -> list[int]:
        ids = [self.lookup(t) for t in tokens]
        if eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int], strip_eos: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_eos and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def build_vocab(corpus: Iterable[Sequence[str] | str], min_freq: int = 1) -> Vocab:
    """Tokens with count >= ``min_freq``, most frequent first, ties lexicographic."""
    counts: Counter[str] = Counter()
    n = 0
    for sent in corpus:
        n += 1
        counts.update(sent.split() if isinstance(sent, str) else sent)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocab(kept)


@dataclass(frozen=True)
class SentencePair:
    """``x`` and ``y`` are EOS-terminated id tuples; BOS is added by the decoder."""

    x: tuple[int, ...]
    y: tuple[int, ...]

    def __post_init__(self):
        for name, seq in (("x", self.x), ("y", self.y)):
            if len(seq) < 1:
                raise ValueError(f"empty {name} sequence")
            if PAD in seq:
                raise ValueError(f"PAD inside {name} sequence")


@dataclass(frozen=True)
class Context:
    """Decision point ``c_t``: the source plus the first ``t - 1`` tokens of ``y``.

    ``y`` is the gold target or a model decode (see ``prefix_source``); only
    ``y[:t-1]`` is ever read.
    """

    x: tuple[int, ...]
    y: tuple[int, ...]
    t: int
    prefix_source: str = "gold"

    def __post_init__(self):
        if not 1 <= self.t <= len(self.y):
            raise ValueError(f"timestep {self.t} outside 1..{len(self.y)}")
        if self.prefix_source not in ("gold", "model-decode"):
            raise ValueError(f"unknown prefix source {self.prefix_source!r}")

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.y[:self.t - 1]

    @classmethod
    def of(cls, pair: SentencePair, t: int) -> "Context":
        return cls(pair.x, pair.y, t)


def contexts(pair: SentencePair) -> list[Context]:
    return [Context.of(pair, t) for t in range(1, len(pair.y) + 1)]


def read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]


def read_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    return list(zip(src, tgt))


def write_parallel(pairs, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for x, y in pairs:
            fs.write(" ".join(x) + "\n")
            ft.write(" ".join(y) + "\n")


def encode_corpus(pairs, src_vocab: Vocab, tgt_vocab: Vocab, max_len: int) -> list[SentencePair]:
    """Map token pairs to ids, dropping pairs that are empty or longer than ``max_len``."""
    out = []
    dropped = 0
    for x, y in pairs:
        if not x or not y or len(x) + 1 > max_len or len(y) + 1 > max_len:
            dropped += 1
            continue
        out.append(SentencePair(tuple(src_vocab.encode(x)), tuple(tgt_vocab.encode(y))))
    if dropped:
        logger.info("dropped %d pairs outside length bounds (max_len=%d)", dropped, max_len)
    return out


def pad_batch(seqs: Sequence[Sequence[int]], prefix: int | None = None) -> np.ndarray:
    """Right-pad id sequences with PAD, optionally prepending ``prefix`` (e.g. BOS)."""
    rows = [([prefix] if prefix is not None else []) + list(s) for s in seqs]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


# --------------------------------------------------------------------------
# synthetic task
# --------------------------------------------------------------------------

def toy_tokens(vocab_size: int) -> list[str]:
    """Content tokens of a toy task whose full vocabulary has ``vocab_size`` entries."""
    return [f"w{i}" for i in range(vocab_size - len(RESERVED))]


def copy_task(n: int, vocab_size: int = 50, max_len: int = 10, seed: int = 0,
              noise: float = 0.0, min_len: int = 1, distractors: int = 0,
              insert: float = 0.0) -> list[tuple[list[str], list[str]]]:
    """Random token strings paired with a copy of themselves.

    With ``noise > 0`` each target token is independently replaced by a random
    token with that probability, so gold targets stop agreeing with what a
    copying model predicts. With ``distractors > 0`` the last ``distractors``
    tokens never appear in targets; before each source word one is inserted
    with probability ``insert`` (repeatedly), so the model has to learn which
    source words to skip. Lengths exclude the EOS that encoding appends, so
    sentences have at most ``max_len - 1`` tokens.
    """
    rng = np.random.default_rng(seed)
    tokens = toy_tokens(vocab_size)
    if not 0 <= distractors < len(tokens):
        raise ValueError(f"distractors must be in [0, {len(tokens)})")
    content, extra = tokens[:len(tokens) - distractors], tokens[len(tokens) - distractors:]
    pairs = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len))
        y = [content[i] for i in rng.integers(0, len(content), size=length)]
        x = []
        budget = max_len - 1 - length
        for w in y:
            while extra and budget > 0 and rng.random() < insert:
                x.append(extra[int(rng.integers(0, len(extra)))])
                budget -= 1
            x.append(w)
        y = list(y)
        if noise > 0:
            flip = rng.random(length) < noise
            for j in np.flatnonzero(flip):
                y[j] = content[int(rng.integers(0, len(content)))]
        pairs.append((x, y))
    return pairs


def write_toy_corpus(directory, n: int = 5000, test_size: int = 500, seed: int = 0,
                     **task) -> dict[str, Path]:
    """Generate ``copy_task(n, seed=seed, **task)`` and write train/test files.

    The last ``test_size`` pairs form the test split. Returns the paths keyed
    like the RunConfig fields (``train_src`` and so on).
    """
    if not 0 < test_size < n:
        raise ValueError(f"test_size must be in (0, {n})")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pairs = copy_task(n, seed=seed, **task)
    paths = {key: d / name for key, name in (("train_src", "train.src"), ("train_tgt", "train.tgt"),
                                             ("test_src", "test.src"), ("test_tgt", "test.tgt"))}
    write_parallel(pairs[:n - test_size], paths["train_src"], paths["train_tgt"])
    write_parallel(pairs[n - test_size:], paths["test_src"], paths["test_tgt"])
    return paths
