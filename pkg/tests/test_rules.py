from collections import Counter

import numpy as np
import pytest

from nmtfidelity.data import EOS, Context, contexts
from nmtfidelity.explain import RelevanceVector, UnsupportedMethod
from nmtfidelity.nmt import greedy_decode, nmt_forward
from nmtfidelity.rules import (RuleDataset, RuleInstance, build_rule_dataset, density_histogram,
                               explain_corpus, extract_rule, frequency_bin, read_rules, topk_words,
                               write_rules)


def rv_with(source, target=()):
    """A hand-made relevance vector over distinct tokens, so tokens identify positions."""
    x = tuple(range(10, 10 + len(source) - 1)) + (EOS,)
    prefix = tuple(range(30, 30 + len(target)))
    ctx = Context(x, prefix + (EOS,), len(prefix) + 1)
    return RelevanceVector(ctx, 5, "pd", np.array(source, dtype=float), np.array(target, dtype=float))


def test_topk_examples():
    rv = rv_with([0.5, 0.3, 0.2])
    assert topk_words(rv, "source", 1) == [(rv.ctx.x[0], 1)]
    assert topk_words(rv, "source", 5) == [(t, i + 1) for i, t in enumerate(rv.ctx.x)]
    assert topk_words(rv, "target", 2) == []


def test_topk_tie_goes_to_smaller_position_and_is_position_ordered():
    rv = rv_with([0.1, 0.7, 0.7, 0.9])
    assert [p for _, p in topk_words(rv, "source", 2)] == [2, 4]
    assert [p for _, p in topk_words(rv, "source", 3)] == [2, 3, 4]


def test_topk_negative_scores_take_largest():
    rv = rv_with([-3.0, -1.0, -2.0])
    assert [p for _, p in topk_words(rv, "source", 1)] == [2]


def test_topk_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        scores = rng.integers(0, 4, size=n).astype(float)     # small range forces ties
        rv = rv_with(list(scores))
        ranked = sorted(((-s, i) for i, s in enumerate(scores)))
        expect = sorted(i + 1 for _, i in ranked[:2])
        assert [p for _, p in topk_words(rv, "source", 2)] == expect


def test_topk_errors():
    rv = rv_with([0.1, 0.2])
    with pytest.raises(ValueError):
        topk_words(rv, "source", 0)
    with pytest.raises(ValueError):
        topk_words(rv, "middle", 1)
    no_target = RelevanceVector(rv.ctx, 5, "attn", rv.source, None)
    with pytest.raises(UnsupportedMethod):
        topk_words(no_target, "target", 1)


def test_extract_rule_label_is_model_argmax(tiny_models, sample_pairs):
    m = tiny_models["transformer"]
    for p in sample_pairs[:3]:
        for ctx in contexts(p):
            r = extract_rule(m, "pd", ctx, 2)
            assert r.label == int(np.argmax(nmt_forward(m, ctx).dist))
            assert len(r.source) + len(r.target) <= 4
            if ctx.t == 1:
                assert r.target == ()
            for tok, pos in r.source:
                assert ctx.x[pos - 1] == tok
            for tok, pos in r.target:
                assert ctx.prefix[pos - 1] == tok


def test_rnn_attention_rejected(tiny_models, sample_pairs):
    with pytest.raises(UnsupportedMethod):
        build_rule_dataset(tiny_models["rnn-search"], "attn", sample_pairs, "teacher-forcing", 1)


def test_empty_corpus_and_bad_scenario(tiny_models, sample_pairs):
    m = tiny_models["transformer"]
    with pytest.raises(ValueError):
        build_rule_dataset(m, "pd", [], "teacher-forcing", 1)
    with pytest.raises(ValueError):
        build_rule_dataset(m, "pd", sample_pairs, "beam", 1)
    with pytest.raises(ValueError):
        build_rule_dataset(m, "pd", sample_pairs, "golden", 0)


def test_scenario_rule_counts(tiny_models, sample_pairs):
    m = tiny_models["transformer"]
    gold = build_rule_dataset(m, "ngrad", sample_pairs, "golden", 1, max_len=8)
    assert len(gold) == sum(len(p.y) for p in sample_pairs)
    assert [r.label for r in gold.rules] == [tok for p in sample_pairs for tok in p.y]
    real = build_rule_dataset(m, "ngrad", sample_pairs, "real-decode", 1, max_len=8)
    assert len(real) == sum(len(greedy_decode(m, p.x, 8)) for p in sample_pairs)
    assert [(r.sid, r.t) for r in gold.rules] == sorted((r.sid, r.t) for r in gold.rules)


def test_golden_equals_teacher_forcing_when_model_is_right(copy_model):
    model, test = copy_model
    pairs = [p for p in test[:60]
             if all(int(np.argmax(nmt_forward(model, c).dist)) == p.y[c.t - 1] for c in contexts(p))][:10]
    assert pairs
    tf = build_rule_dataset(model, "pd", pairs, "teacher-forcing", 2)
    gd = build_rule_dataset(model, "pd", pairs, "golden", 2)
    assert tf.rules == gd.rules


def test_copy_model_pd_rule_is_aligned_word(copy_model):
    model, test = copy_model
    hits = total = 0
    for p in test[:30]:
        for ctx in contexts(p):
            r = extract_rule(model, "pd", ctx, 1)
            hits += r.source == ((ctx.x[ctx.t - 1], ctx.t),) and r.label == ctx.x[ctx.t - 1]
            total += 1
    assert hits / total >= 0.95


def test_rules_monotone_in_k(tiny_models, sample_pairs):
    cache = explain_corpus(tiny_models["transformer"], sample_pairs, ["pd", "wgrad"])
    for method in ("pd", "wgrad"):
        prev = cache.rules(method, 1).rules
        for k in (2, 3, 4):
            cur = cache.rules(method, k).rules
            for a, b in zip(prev, cur):
                assert set(a.source) <= set(b.source) and set(a.target) <= set(b.target)
                assert len(b.source) <= k and len(b.target) <= k
            prev = cur


def test_rule_dataset_deterministic(tiny_models, sample_pairs):
    m = tiny_models["transformer"]
    a = build_rule_dataset(m, "attn", sample_pairs, "teacher-forcing", 2)
    b = build_rule_dataset(m, "attn", sample_pairs, "teacher-forcing", 2)
    assert a.rules == b.rules and a.meta == b.meta


def rule(src, tgt, label):
    return RuleInstance(tuple((t, i + 1) for i, t in enumerate(src)),
                        tuple((t, i + 1) for i, t in enumerate(tgt)), label)


def test_density_examples():
    distinct = [rule([i], [], 5) for i in range(7)]
    assert density_histogram(distinct).as_row() == [7, 7, 0, 0, 0, 0]
    assert density_histogram([rule([4], [6], 5)] * 12).as_row() == [1, 0, 0, 1, 0, 0]
    with pytest.raises(ValueError):
        density_histogram([])


def test_density_identity_ignores_positions():
    a = RuleInstance(((4, 1), (5, 2)), (), 9)
    b = RuleInstance(((5, 1), (4, 3)), (), 9)
    assert density_histogram([a, b]).total == 1


def test_frequency_bin_edges():
    assert [frequency_bin(f) for f in (1, 2, 10, 11, 100, 101, 1000, 1001)] == [0, 1, 1, 2, 2, 3, 3, 4]


def test_density_matches_counting_oracle(tiny_models, sample_pairs):
    ds = build_rule_dataset(tiny_models["transformer"], "pd", sample_pairs * 3, "teacher-forcing", 1)
    counts = Counter((tuple(sorted(t for t, _ in r.source)), tuple(sorted(t for t, _ in r.target)),
                      r.label) for r in ds.rules)
    bins = [0] * 5
    for c in counts.values():
        bins[0 if c <= 1 else 1 if c <= 10 else 2 if c <= 100 else 3 if c <= 1000 else 4] += 1
    h = density_histogram(ds)
    assert h.total == len(counts) == sum(h.bins)
    assert list(h.bins) == bins


def test_rule_file_round_trip(tmp_path, tiny_models, sample_pairs):
    ds = build_rule_dataset(tiny_models["transformer"], "pd", sample_pairs, "teacher-forcing", 2,
                            meta={"split": "test"})
    path = tmp_path / "rules.jsonl"
    write_rules(ds, path)
    back = read_rules(path)
    assert back.rules == ds.rules and back.meta == ds.meta and back.sequences == ds.sequences
    first = path.read_text().splitlines()[0]
    assert first.startswith('{"sid": 0, "t": 1, "scenario": "teacher-forcing", "method": "pd", "k": 2, "src"')
    write_rules(back, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_subset_keeps_meta():
    ds = RuleDataset([rule([4], [], 5), rule([6], [], 7)], {"k": 1})
    sub = ds.subset([1])
    assert sub.rules == [ds.rules[1]] and sub.meta == {"k": 1}
