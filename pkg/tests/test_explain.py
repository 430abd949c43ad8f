import json

import numpy as np
import pytest
from oracles import exact_dot, exact_l1, occlusion_oracle

from nmtfidelity.data import EOS, Context, contexts
from nmtfidelity.explain import (METHODS, EmbeddingGradient, counters, dump_relevance,
                                 explain_sentence, relevance, relevance_attention,
                                 relevance_gradient, relevance_ngrad, relevance_pd, relevance_wgrad)
from nmtfidelity.nmt import make_model, nmt_forward

KINDS = ("rnn-search", "transformer")


def all_contexts(pairs, n=3):
    return [ctx for p in pairs[:n] for ctx in contexts(p)]


@pytest.mark.parametrize("kind", KINDS)
def test_pd_matches_occlusion_oracle(kind, tiny_models, sample_pairs):
    m = tiny_models[kind]
    for ctx in all_contexts(sample_pairs):
        y = int(np.argmax(nmt_forward(m, ctx).dist))
        rv = relevance_pd(m, ctx, y)
        src, tgt = occlusion_oracle(m, ctx, y)
        np.testing.assert_allclose(rv.source, src, atol=1e-6)
        np.testing.assert_allclose(rv.target, tgt, atol=1e-6)
        assert (np.abs(rv.source) <= 1).all()


def test_pd_zero_fan_out_word_scores_zero(toy_vocab):
    m = make_model("rnn-search", toy_vocab, toy_vocab, emb_dim=8, hidden_dim=8, seed=1)
    m.params["src_emb"][9] = 0.0
    rv = relevance_pd(m, Context((5, 9, EOS), (6, EOS), 1), 6)
    assert rv.source[1] == 0.0


def test_ngrad_and_wgrad_examples():
    ctx = Context((5, EOS), (6, EOS), 1)
    g = EmbeddingGradient(ctx, 6, np.array([[0.0, 0.0], [0.5, -0.5]]), np.zeros((0, 2)),
                          np.array([[3.0, -1.0], [0.0, 0.0]]), np.zeros((0, 2)))
    np.testing.assert_array_equal(relevance_ngrad(g).source, [0.0, 1.0])
    g2 = EmbeddingGradient(ctx, 6, np.array([[1.0, 2.0], [0.5, -0.5]]), np.zeros((0, 2)),
                           np.array([[3.0, -1.0], [0.0, 0.0]]), np.zeros((0, 2)))
    np.testing.assert_array_equal(relevance_wgrad(g2).source, [1.0, 0.0])


@pytest.mark.parametrize("kind", KINDS)
def test_ngrad_wgrad_elementwise_oracles(kind, tiny_models, sample_pairs):
    m = tiny_models[kind]
    for ctx in all_contexts(sample_pairs, 2):
        g = relevance_gradient(m, ctx)
        n, w = relevance_ngrad(g), relevance_wgrad(g)
        for i in range(len(ctx.x)):
            assert n.source[i] == exact_l1(g.source[i])
            assert w.source[i] == exact_dot(g.source[i], g.source_emb[i])
        for j in range(ctx.t - 1):
            assert n.target[j] == exact_l1(g.target[j])
            assert w.target[j] == exact_dot(g.target[j], g.target_emb[j])
        assert (n.source >= 0).all()


def test_wgrad_embedding_shape_checked(tiny_models, sample_pairs):
    g = relevance_gradient(tiny_models["transformer"], contexts(sample_pairs[0])[0])
    with pytest.raises(ValueError):
        relevance_wgrad(g, (np.zeros((1, 3)), g.target_emb))


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind, toy_vocab):
    m = make_model(kind, toy_vocab, toy_vocab, emb_dim=6, hidden_dim=8, seed=2)
    ctx = Context((5, 6, EOS), (7, 8, EOS), 3)
    y = 9
    g = relevance_gradient(m, ctx, y)
    h = 1e-3
    table = m.params["src_emb"]
    orig = table.copy()
    # position 2 holds token 6, which occurs once, so the table row is that lookup site
    numeric = np.zeros(table.shape[1])
    for d in range(table.shape[1]):
        table[6, d] = orig[6, d] + h
        fp = float(nmt_forward(m, ctx).dist[y])
        table[6, d] = orig[6, d] - h
        fm = float(nmt_forward(m, ctx).dist[y])
        table[6, d] = orig[6, d]
        numeric[d] = (fp - fm) / (2 * h)
    scale = max(np.abs(numeric).max(), np.abs(g.source[1]).max(), 1e-6)
    assert np.abs(g.source[1] - numeric).max() / scale < 1e-2


def test_gradient_zero_for_disconnected_word(toy_vocab):
    m = make_model("transformer", toy_vocab, toy_vocab, emb_dim=8, hidden_dim=8, seed=3)
    ctx = Context((5, 6, EOS), (7, EOS), 1)
    # with t=1 the prefix is empty, so the future target word cannot matter
    g = relevance_gradient(m, ctx, 5)
    assert g.target.shape == (0, 8)
    assert np.isfinite(g.source).all()


def test_one_backward_per_decision(tiny_models, sample_pairs):
    m = tiny_models["transformer"]
    p = sample_pairs[0]
    before = counters["gradient"]
    explain_sentence(m, p.x, p.y, ["ngrad", "wgrad"])
    assert counters["gradient"] - before == len(p.y)
    before = counters["gradient"]
    for ctx in contexts(p):
        relevance(m, "ngrad", ctx)
    assert counters["gradient"] - before == len(p.y)


@pytest.mark.parametrize("kind", KINDS)
def test_attention_relevance(kind, tiny_models, sample_pairs):
    m = tiny_models[kind]
    for ctx in all_contexts(sample_pairs, 2):
        a = relevance_attention(m, ctx, 5)
        b = relevance_attention(m, ctx, 9)
        np.testing.assert_array_equal(a.source, b.source)
        assert abs(a.source.sum() - 1) < 1e-5
        if kind == "rnn-search":
            assert a.target is None
        elif ctx.t == 1:
            assert a.target.size == 0
        else:
            assert abs(a.target.sum() - 1) < 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_key_sets(kind, tiny_models, sample_pairs):
    m = tiny_models[kind]
    ctx = contexts(sample_pairs[1])[-1]
    expected = {("source", i) for i in range(1, len(ctx.x) + 1)} | \
        {("target", j) for j in range(1, ctx.t)}
    for method in METHODS:
        keys = set(relevance(m, method, ctx).scores())
        if method == "attn" and kind == "rnn-search":
            assert keys == {k for k in expected if k[0] == "source"}
        else:
            assert keys == expected


@pytest.mark.parametrize("kind", KINDS)
def test_sentence_batch_matches_single_decisions(kind, tiny_models, sample_pairs):
    m = tiny_models[kind]
    methods = [mt for mt in METHODS if not (kind == "rnn-search" and mt == "attn")]
    for p in sample_pairs[:3]:
        batched = explain_sentence(m, p.x, p.y, methods)
        for method in methods:
            for ctx, rv in zip(contexts(p), batched[method]):
                single = relevance(m, method, ctx)
                assert rv.label == single.label
                np.testing.assert_allclose(rv.source, single.source, rtol=1e-4, atol=1e-7)
                if single.target is not None:
                    np.testing.assert_allclose(rv.target, single.target, rtol=1e-4, atol=1e-7)


def test_methods_deterministic(tiny_models, sample_pairs):
    m = tiny_models["transformer"]
    ctx = contexts(sample_pairs[2])[-1]
    for method in METHODS:
        a, b = relevance(m, method, ctx), relevance(m, method, ctx)
        assert a.source.tobytes() == b.source.tobytes()


def test_unknown_method(tiny_models, sample_pairs):
    with pytest.raises(ValueError):
        relevance(tiny_models["transformer"], "lrp", contexts(sample_pairs[0])[0])


def test_copy_model_attention_is_diagonal(copy_model):
    model, test = copy_model
    hits = total = 0
    for p in test[:40]:
        for rv in explain_sentence(model, p.x, p.y, ["attn"])["attn"]:
            hits += int(np.argmax(rv.source)) + 1 == rv.ctx.t
            total += 1
    assert hits / total >= 0.95


def test_dump_relevance(tmp_path, tiny_models, sample_pairs):
    m = tiny_models["transformer"]
    rvs = explain_sentence(m, sample_pairs[0].x, sample_pairs[0].y, ["pd"])["pd"]
    dump_relevance(tmp_path / "r.jsonl", [(0, rv) for rv in rvs])
    recs = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["t"] for r in recs] == list(range(1, len(rvs) + 1))
    assert recs[0]["method"] == "pd" and recs[0]["scores"][0][:2] == ["source", 1]
