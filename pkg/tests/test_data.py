from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nmtfidelity.data import (BOS, EOS, PAD, UNK, Context, SentencePair, Vocab, build_vocab,
                              contexts, copy_task, encode_corpus, pad_batch, read_parallel,
                              toy_tokens, write_parallel, write_toy_corpus)


def test_reserved_ids():
    v = Vocab()
    assert (v.lookup("<pad>"), v.lookup("<unk>"), v.lookup("<s>"), v.lookup("</s>")) == (PAD, UNK, BOS, EOS)
    assert len(v) == 4


def test_build_vocab_min_freq_one():
    v = build_vocab(["a a b"], min_freq=1)
    assert len(v) == 6
    assert v.token(4) == "a" and v.token(5) == "b"


def test_build_vocab_min_freq_two():
    v = build_vocab(["a a b"], min_freq=2)
    assert len(v) == 5
    assert v.lookup("b") == UNK


def test_build_vocab_tie_break_is_lexicographic():
    v = build_vocab([["c", "b", "a", "c"]])
    assert v.itos[4:] == ["c", "a", "b"]


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([])


def test_toy_corpus_vocab_size_matches_distinct_count():
    pairs = copy_task(300, seed=3)
    v = build_vocab([x for x, _ in pairs])
    distinct = len({tok for x, _ in pairs for tok in x})
    assert len(v) == distinct + 4


@given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6), min_size=1, max_size=8))
def test_vocab_is_bijective_over_content(corpus):
    v = build_vocab(corpus)
    for tok in {t for s in corpus for t in s}:
        assert v.token(v.lookup(tok)) == tok
    assert len(set(v.itos)) == len(v)


def test_encode_decode_round_trip():
    v = Vocab.from_tokens(["x", "y"])
    ids = v.encode(["y", "x", "zzz"])
    assert ids == [5, 4, UNK, EOS]
    assert v.decode(ids) == ["y", "x", "<unk>"]


def test_content_hash_tracks_order():
    assert Vocab(["a", "b"]).content_hash() != Vocab(["b", "a"]).content_hash()
    assert Vocab(["a", "b"]).content_hash() == Vocab(["a", "b"]).content_hash()


def test_sentence_pair_invariants():
    with pytest.raises(ValueError):
        SentencePair((), (4, EOS))
    with pytest.raises(ValueError):
        SentencePair((4, PAD, EOS), (4, EOS))


def test_context_prefix_and_bounds():
    pair = SentencePair((4, 5, EOS), (6, 7, EOS))
    assert Context.of(pair, 1).prefix == ()
    assert Context.of(pair, 3).prefix == (6, 7)
    with pytest.raises(ValueError):
        Context.of(pair, 4)
    assert [c.t for c in contexts(pair)] == [1, 2, 3]


def test_encode_corpus_drops_long_pairs():
    v = Vocab.from_tokens(["a"])
    out = encode_corpus([(["a"] * 3, ["a"]), (["a"] * 9, ["a"]), ([], ["a"])], v, v, max_len=5)
    assert len(out) == 1
    assert out[0].x == (4, 4, 4, EOS)


def test_pad_batch_with_prefix():
    out = pad_batch([[5, 6], [7]], prefix=BOS)
    np.testing.assert_array_equal(out, [[BOS, 5, 6], [BOS, 7, PAD]])


def test_parallel_files_round_trip(tmp_path):
    pairs = [(["a", "b"], ["c"]), (["d"], ["e", "f"])]
    write_parallel(pairs, tmp_path / "s", tmp_path / "t")
    assert read_parallel(tmp_path / "s", tmp_path / "t") == pairs
    (tmp_path / "t").write_text("c\n")
    with pytest.raises(ValueError):
        read_parallel(tmp_path / "s", tmp_path / "t")


def test_copy_task_is_a_copy_without_noise():
    for x, y in copy_task(200, seed=1):
        assert x == y
        assert 1 <= len(x) <= 9


def test_copy_task_noise_rate():
    pairs = copy_task(3000, noise=0.1, seed=2)
    flips = sum(a != b for x, y in pairs for a, b in zip(x, y))
    total = sum(len(x) for x, _ in pairs)
    # a flip draws a random token, which is the same token 1/46 of the time
    assert abs(flips / total - 0.1 * 45 / 46) < 0.015


def test_copy_task_distractors():
    tokens = toy_tokens(50)
    extra = set(tokens[-6:])
    pairs = copy_task(1000, distractors=6, insert=0.3, seed=4)
    inserted = 0
    for x, y in pairs:
        assert not extra & set(y)
        assert [w for w in x if w not in extra] == y
        assert len(x) <= 9
        inserted += len(x) - len(y)
    assert inserted > 0
    assert copy_task(50, distractors=6, insert=0.3, seed=4) == pairs[:50]


def test_copy_task_token_distribution_covers_vocab():
    counts = Counter(t for x, _ in copy_task(2000, seed=0) for t in x)
    assert set(counts) == set(toy_tokens(50))


def test_write_toy_corpus(tmp_path):
    paths = write_toy_corpus(tmp_path, n=50, test_size=10, seed=3, noise=0.1)
    pairs = copy_task(50, seed=3, noise=0.1)
    assert read_parallel(paths["train_src"], paths["train_tgt"]) == pairs[:40]
    assert read_parallel(paths["test_src"], paths["test_tgt"]) == pairs[40:]
    with pytest.raises(ValueError):
        write_toy_corpus(tmp_path, n=5, test_size=5)
