"""Generalized translation rules: top-k relevant words mapped to the model's decision."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import SentencePair
from .explain import METHODS, RelevanceVector, UnsupportedMethod, explain_sentence, relevance
from .nmt import NmtModel, greedy_decode_batch, nmt_forward

SCENARIOS = ("teacher-forcing", "real-decode", "golden")
BIN_EDGES = (1, 10, 100, 1000)   # B1=(0,1], B2=(1,10], ..., B5=(1000,inf)


@dataclass(frozen=True)
class RuleInstance:
    source: tuple[tuple[int, int], ...]    # (token id, 1-based position), in position order
    target: tuple[tuple[int, int], ...]
    label: int
    sid: int = -1
    t: int = 0

    def identity(self):
        """Position-free identity used for density counting."""
        return (tuple(sorted(tok for tok, _ in self.source)),
                tuple(sorted(tok for tok, _ in self.target)), self.label)


@dataclass
class RuleDataset:
    rules: list[RuleInstance]
    meta: dict
    # sid -> (x, y) the contexts were read from (gold or decoded); needed by the baseline
    sequences: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=dict)

    def __len__(self):
        return len(self.rules)

    def subset(self, idx: Sequence[int]) -> "RuleDataset":
        return RuleDataset([self.rules[i] for i in idx], dict(self.meta), self.sequences)


def topk_words(rv: RelevanceVector, side: str, k: int) -> list[tuple[int, int]]:
    """The ``k`` highest-scoring ``(token, position)`` pairs of one side.

    Ties go to the smaller position; the result is in position order.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if side == "source":
        scores, tokens = rv.source, rv.ctx.x
    elif side == "target":
        if rv.target is None:
            raise UnsupportedMethod(f"method {rv.method!r} gives no target-side scores for this model")
        scores, tokens = rv.target, rv.ctx.prefix
    else:
        raise ValueError(f"unknown side {side!r}")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]
    return [(int(tokens[i]), i + 1) for i in sorted(order)]


def rule_from_relevance(rv: RelevanceVector, k: int, label: int | None = None,
                        sid: int = -1) -> RuleInstance:
    return RuleInstance(tuple(topk_words(rv, "source", k)), tuple(topk_words(rv, "target", k)),
                        rv.label if label is None else int(label), sid, rv.ctx.t)


def extract_rule(model: NmtModel, method: str, ctx, k: int) -> RuleInstance:
    """Score relevance for ``f(c_t)`` and keep the top-k words on each side."""
    label = int(np.argmax(nmt_forward(model, ctx).dist))
    return rule_from_relevance(relevance(model, method, ctx, label), k)


def check_method(model: NmtModel, method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown explanation method {method!r}")
    if method == "attn" and model.kind == "rnn-search":
        raise UnsupportedMethod("attention gives no target-side relevance for rnn-search")


def scenario_sequences(model: NmtModel, pairs: Sequence[SentencePair], scenario: str,
                       max_len: int, batch_size: int = 128):
    """The target sequence contexts are read from: gold ``y`` or a greedy decode."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if scenario != "real-decode":
        return [p.y for p in pairs]
    out = []
    for i in range(0, len(pairs), batch_size):
        out.extend(tuple(d) for d in greedy_decode_batch(
            model, [p.x for p in pairs[i:i + batch_size]], max_len))
    return out


@dataclass
class RelevanceCache:
    """Relevance vectors for every decision point of a corpus under one scenario.

    Rules for any ``k`` can be read off without re-running the explainers.
    """
    scenario: str
    pairs: list[SentencePair]
    sequences: list[tuple[int, ...]]
    vectors: dict[str, list[list[RelevanceVector]]]
    vocab_sizes: tuple[int, int] = (0, 0)

    def rules(self, method: str, k: int, meta: dict | None = None) -> RuleDataset:
        rules = []
        for sid, (pair, rvs) in enumerate(zip(self.pairs, self.vectors[method])):
            for rv in rvs:
                label = pair.y[rv.ctx.t - 1] if self.scenario == "golden" else None
                rules.append(rule_from_relevance(rv, k, label, sid))
        info = {"method": method, "k": k, "scenario": self.scenario,
                "src_vocab_size": self.vocab_sizes[0], "tgt_vocab_size": self.vocab_sizes[1]}
        info.update(meta or {})
        seqs = {sid: (p.x, tuple(s)) for sid, (p, s) in enumerate(zip(self.pairs, self.sequences))}
        return RuleDataset(rules, info, seqs)


def explain_corpus(model: NmtModel, pairs: Sequence[SentencePair], methods: Sequence[str],
                   scenario: str = "teacher-forcing", max_len: int = 64) -> RelevanceCache:
    if not pairs:
        raise ValueError("empty corpus")
    for m in methods:
        check_method(model, m)
    seqs = scenario_sequences(model, pairs, scenario, max_len)
    source = "model-decode" if scenario == "real-decode" else "gold"
    vectors: dict[str, list[list[RelevanceVector]]] = {m: [] for m in methods}
    for pair, y in zip(pairs, seqs):
        res = explain_sentence(model, pair.x, y, methods, source)
        for m in methods:
            vectors[m].append(res[m])
    return RelevanceCache(scenario, list(pairs), list(seqs), vectors,
                          (len(model.src_vocab), len(model.tgt_vocab)))


def build_rule_dataset(model: NmtModel, method: str, pairs: Sequence[SentencePair],
                       scenario: str, k: int, max_len: int = 64,
                       meta: dict | None = None) -> RuleDataset:
    """One rule per decision point per sentence, in (sentence id, t) order.

    teacher-forcing: gold prefix, label ``f(c_t)``; real-decode: greedy-decode
    prefix, label ``f(c_t)``; golden: gold prefix, gold label. Relevance is
    always scored for ``f(c_t)``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cache = explain_corpus(model, pairs, [method], scenario, max_len)
    return cache.rules(method, k, meta)


# --------------------------------------------------------------------------
# density
# --------------------------------------------------------------------------

@dataclass
class DensityHistogram:
    total: int
    bins: tuple[int, int, int, int, int]

    def as_row(self) -> list[int]:
        return [self.total, *self.bins]


def frequency_bin(freq: int) -> int:
    """Index 0..4 of the bin holding a rule seen ``freq`` times."""
    for i, edge in enumerate(BIN_EDGES):
        if freq <= edge:
            return i
    return len(BIN_EDGES)


def density_histogram(ds: RuleDataset | Iterable[RuleInstance]) -> DensityHistogram:
    rules = ds.rules if isinstance(ds, RuleDataset) else list(ds)
    if not rules:
        raise ValueError("empty rule dataset")
    freqs = Counter(r.identity() for r in rules)
    bins = [0] * 5
    for f in freqs.values():
        bins[frequency_bin(f)] += 1
    return DensityHistogram(len(freqs), tuple(bins))


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def write_rules(ds: RuleDataset, path) -> None:
    """Rules as JSON lines with fixed field order; metadata goes to ``<path>.meta.json``."""
    path = Path(path)
    scen, meth, k = ds.meta.get("scenario"), ds.meta.get("method"), ds.meta.get("k")
    with open(path, "w", encoding="utf-8") as fh:
        for r in ds.rules:
            rec = {"sid": r.sid, "t": r.t, "scenario": scen, "method": meth, "k": k,
                   "src": [list(w) for w in r.source], "tgt": [list(w) for w in r.target],
                   "label": r.label}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    side = {"meta": ds.meta,
            "sequences": {str(s): [list(x), list(y)] for s, (x, y) in sorted(ds.sequences.items())}}
    Path(str(path) + ".meta.json").write_text(json.dumps(side, sort_keys=True), encoding="utf-8")


def read_rules(path) -> RuleDataset:
    rules = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            rules.append(RuleInstance(tuple(tuple(w) for w in rec["src"]),
                                      tuple(tuple(w) for w in rec["tgt"]),
                                      rec["label"], rec["sid"], rec["t"]))
    meta, seqs = {}, {}
    side = Path(str(path) + ".meta.json")
    if side.exists():
        info = json.loads(side.read_text(encoding="utf-8"))
        meta = info["meta"]
        seqs = {int(s): (tuple(x), tuple(y)) for s, (x, y) in info["sequences"].items()}
    return RuleDataset(rules, meta, seqs)
