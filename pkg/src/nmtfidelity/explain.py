"""Word relevance scores for a single NMT decision.

Scores are keyed by occurrence: source positions ``1..|x|`` and target-prefix
positions ``1..t-1``. Gradient methods differentiate the probability
``P(y | c_t)`` (not its log) with respect to each word's embedding-lookup
output; prediction difference zeroes one lookup output at a time.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Sequence

import math

import numpy as np

from .autodiff import Graph, softmax_array
from .data import BOS, Context
from .nmt import NmtModel, context_arrays, nmt_forward

METHODS = ("attn", "pd", "ngrad", "wgrad")

# number of per-decision gradient evaluations performed, for cost accounting
counters: Counter[str] = Counter()


class UnsupportedMethod(ValueError):
    """The explanation method cannot score the requested side for this model."""


@dataclass
class RelevanceVector:
    ctx: Context
    label: int
    method: str
    source: np.ndarray                  # scores for source positions 1..|x|
    target: np.ndarray | None           # prefix positions 1..t-1; None if unsupported

    def items(self) -> Iterator[tuple[tuple[str, int], float]]:
        for i, s in enumerate(self.source, 1):
            yield ("source", i), float(s)
        if self.target is not None:
            for j, s in enumerate(self.target, 1):
                yield ("target", j), float(s)

    def scores(self) -> dict[tuple[str, int], float]:
        return dict(self.items())


@dataclass
class EmbeddingGradient:
    ctx: Context
    label: int
    source: np.ndarray          # (|x|, E)
    target: np.ndarray          # (t-1, E)
    source_emb: np.ndarray
    target_emb: np.ndarray


def _label(model, ctx, y):
    return int(np.argmax(nmt_forward(model, ctx).dist)) if y is None else int(y)


def relevance_attention(model: NmtModel, ctx: Context, y: int | None = None) -> RelevanceVector:
    """Attention weights at the decision point; ``y`` only labels the result.

    RNN-Search has no target-side attention, so ``target`` is None.
    """
    out = nmt_forward(model, ctx)
    label = int(np.argmax(out.dist)) if y is None else int(y)
    target = None if out.self_attn is None else out.self_attn.astype(np.float64)
    return RelevanceVector(ctx, label, "attn", out.cross_attn.astype(np.float64), target)


def relevance_gradient(model: NmtModel, ctx: Context, y: int | None = None) -> EmbeddingGradient:
    """Gradient of ``P(y | c_t)`` w.r.t. every context word embedding (one backward pass)."""
    y = _label(model, ctx, y)
    src, tgt_in = context_arrays(ctx)
    g = Graph()
    fw = model.run(g, src, tgt_in)
    p = g.pick(g.softmax(fw.logits[:, ctx.t - 1]), [y])
    g.backward(g.sum(p))
    counters["gradient"] += 1
    gs, gt = g.grad(fw.src_emb)[0], g.grad(fw.tgt_emb)[0, 1:ctx.t]
    if not (np.isfinite(gs).all() and np.isfinite(gt).all()):
        raise FloatingPointError(f"non-finite gradient at t={ctx.t} for label {y}")
    return EmbeddingGradient(ctx, y, gs, gt, fw.src_emb.data[0], fw.tgt_emb.data[0, 1:ctx.t])


def _rowsum(a) -> np.ndarray:
    """Correctly rounded row sums, so the result does not depend on summation order."""
    a = np.asarray(a, dtype=np.float64)
    return np.array([math.fsum(row) for row in a], dtype=np.float64).reshape(a.shape[:-1])


def relevance_ngrad(g: EmbeddingGradient) -> RelevanceVector:
    """L1 norm of each word's gradient."""
    return RelevanceVector(g.ctx, g.label, "ngrad", _rowsum(np.abs(g.source)), _rowsum(np.abs(g.target)))


def relevance_wgrad(g: EmbeddingGradient, embeddings=None) -> RelevanceVector:
    """Gradient dotted with the word's own embedding; may be negative.

    ``embeddings`` is ``(source_emb, target_emb)``; defaults to the
    embeddings recorded alongside the gradient.
    """
    src_emb, tgt_emb = embeddings if embeddings is not None else (g.source_emb, g.target_emb)
    if np.shape(src_emb) != g.source.shape or np.shape(tgt_emb) != g.target.shape:
        raise ValueError("embedding shapes do not match the gradient")
    # float32 products are exact in float64; fsum then rounds once
    dot = lambda a, b: _rowsum(a.astype(np.float64) * np.asarray(b, dtype=np.float64))
    return RelevanceVector(g.ctx, g.label, "wgrad", dot(g.source, src_emb), dot(g.target, tgt_emb))


def relevance_pd(model: NmtModel, ctx: Context, y: int | None = None) -> RelevanceVector:
    """``P(y | c_t) - P(y | c_t with one word embedding zeroed)`` per occurrence.

    Row 0 of the batch is the untouched context; each further row zeroes
    exactly one source or prefix position.
    """
    y = _label(model, ctx, y)
    src, tgt_in = context_arrays(ctx)
    n_src, n_tgt = len(ctx.x), ctx.t - 1
    rows = 1 + n_src + n_tgt
    src_keep = np.ones((rows, n_src), dtype=bool)
    tgt_keep = np.ones((rows, ctx.t), dtype=bool)
    for i in range(n_src):
        src_keep[1 + i, i] = False
    for j in range(n_tgt):
        tgt_keep[1 + n_src + j, 1 + j] = False
    g = Graph()
    fw = model.run(g, np.repeat(src, rows, 0), np.repeat(tgt_in, rows, 0), src_keep, tgt_keep)
    probs = g.softmax(fw.logits[:, ctx.t - 1]).data[:, y].astype(np.float64)
    diff = probs[0] - probs[1:]
    return RelevanceVector(ctx, y, "pd", diff[:n_src], diff[n_src:])


def relevance(model: NmtModel, method: str, ctx: Context, y: int | None = None) -> RelevanceVector:
    if method == "attn":
        return relevance_attention(model, ctx, y)
    if method == "pd":
        return relevance_pd(model, ctx, y)
    if method == "ngrad":
        return relevance_ngrad(relevance_gradient(model, ctx, y))
    if method == "wgrad":
        return relevance_wgrad(relevance_gradient(model, ctx, y))
    raise ValueError(f"unknown explanation method {method!r}; expected one of {METHODS}")


# --------------------------------------------------------------------------
# whole-sentence batches, used for corpus extraction
# --------------------------------------------------------------------------

def explain_sentence(model: NmtModel, x: Sequence[int], y: Sequence[int],
                     methods: Sequence[str] = METHODS,
                     prefix_source: str = "gold") -> dict[str, list[RelevanceVector]]:
    """Relevance vectors for every decision point ``t = 1..|y|`` of one sentence.

    Labels are ``f(c_t)`` from one teacher-forced pass over ``y``. Gradients
    for all ``|y|`` decisions come from one backward over ``|y|`` independent
    batch rows; prediction difference batches every occlusion of every
    decision. Causal decoding makes the extra suffix tokens inert.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown explanation methods {sorted(unknown)}")
    x, y = tuple(x), tuple(y)
    T, S = len(y), len(x)
    src = np.asarray([x], dtype=np.int64)
    tgt_in = np.asarray([(BOS,) + y[:-1]], dtype=np.int64)
    ctxs = [Context(x, y, t, prefix_source) for t in range(1, T + 1)]

    g = Graph()
    fw = model.run(g, src, tgt_in)
    labels = fw.logits.data[0].argmax(-1)
    out: dict[str, list[RelevanceVector]] = {}

    if "attn" in methods:
        rvs = []
        for t, ctx in enumerate(ctxs, 1):
            tgt = None if fw.self_attn is None else fw.self_attn[0, t - 1, 1:t].astype(np.float64)
            rvs.append(RelevanceVector(ctx, int(labels[t - 1]), "attn",
                                       fw.cross_attn[0, t - 1].astype(np.float64), tgt))
        out["attn"] = rvs

    if "ngrad" in methods or "wgrad" in methods:
        g = Graph()
        fw_b = model.run(g, np.repeat(src, T, 0), np.repeat(tgt_in, T, 0))
        rows = np.arange(T)
        select = np.zeros((T, T, len(model.tgt_vocab)), dtype=np.float32)
        select[rows, rows, labels] = 1.0
        g.backward(g.sum(g.softmax(fw_b.logits) * g.constant(select)))
        counters["gradient"] += T
        gs, gt = g.grad(fw_b.src_emb), g.grad(fw_b.tgt_emb)
        if not (np.isfinite(gs).all() and np.isfinite(gt).all()):
            raise FloatingPointError(f"non-finite gradient in sentence x={x}")
        es, et = fw_b.src_emb.data, fw_b.tgt_emb.data
        grads = [EmbeddingGradient(ctx, int(labels[t - 1]), gs[t - 1], gt[t - 1, 1:t],
                                   es[t - 1], et[t - 1, 1:t]) for t, ctx in enumerate(ctxs, 1)]
        if "ngrad" in methods:
            out["ngrad"] = [relevance_ngrad(e) for e in grads]
        if "wgrad" in methods:
            out["wgrad"] = [relevance_wgrad(e) for e in grads]

    if "pd" in methods:
        starts, src_keep, tgt_keep = [], [], []
        for t in range(1, T + 1):
            starts.append(len(src_keep))
            for occ in range(-1, S + t - 1):
                sk = np.ones(S, dtype=bool)
                tk = np.ones(T, dtype=bool)
                if 0 <= occ < S:
                    sk[occ] = False
                elif occ >= S:
                    tk[1 + occ - S] = False
                src_keep.append(sk)
                tgt_keep.append(tk)
        n = len(src_keep)
        g = Graph()
        fw_p = model.run(g, np.repeat(src, n, 0), np.repeat(tgt_in, n, 0),
                         np.asarray(src_keep), np.asarray(tgt_keep))
        rvs = []
        for t, ctx in enumerate(ctxs, 1):
            a = starts[t - 1]
            b = a + S + t
            probs = softmax_array(fw_p.logits.data[a:b, t - 1])[:, labels[t - 1]].astype(np.float64)
            diff = probs[0] - probs[1:]
            rvs.append(RelevanceVector(ctx, int(labels[t - 1]), "pd", diff[:S], diff[S:]))
        out["pd"] = rvs
    return out


def dump_relevance(path, records: Sequence[tuple[int, RelevanceVector]]) -> None:
    """Write ``(sentence id, vector)`` pairs as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid, rv in records:
            rec = {"sid": sid, "t": rv.ctx.t, "y": rv.label, "method": rv.method,
                   "scores": [[side, pos, score] for (side, pos), score in rv.items()]}
            fh.write(json.dumps(rec) + "\n")
