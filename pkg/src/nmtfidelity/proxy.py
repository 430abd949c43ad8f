"""Proxy models trained on generalized rules, and the fidelity metric built on them.

A proxy sees only the selected words of a rule: ``k`` source slots and ``k``
target slots, PAD-filled. The metric of an explanation method is the lowest
test perplexity any proxy of a family reaches at imitating the NMT model's
own decisions.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import NEG_INF, Adam, Graph, Tensor, load_checkpoint, save_checkpoint
from .data import BOS, PAD, pad_batch
from .nmt import NmtModel, TrainingDiverged, clip_gradients, split_corpus
from .rules import RuleDataset, RuleInstance

logger = logging.getLogger(__name__)

PROXY_KINDS = ("FN", "RN", "SA")
BASELINE = "baseline-masked"
FAMILIES = {"FN": ("FN",), "RN": ("RN",), "SA": ("SA",), "Comb": ("FN", "RN", "SA")}
MIN_PROB = 1e-12
MAX_NLL = -math.log(MIN_PROB)
_SEED_OFFSET = {"FN": 101, "RN": 202, "SA": 303}


@dataclass
class RuleBatch:
    src_tok: np.ndarray    # (B, k)
    src_pos: np.ndarray
    tgt_tok: np.ndarray
    tgt_pos: np.ndarray
    labels: np.ndarray     # (B,)

    @property
    def slot_tokens(self):
        return np.concatenate([self.src_tok, self.tgt_tok], axis=1)

    @property
    def mask(self):
        return self.slot_tokens != PAD


def encode_rules(rules: Sequence[RuleInstance], k: int, max_pos: int) -> RuleBatch:
    B = len(rules)
    st, sp = np.zeros((B, k), np.int64), np.zeros((B, k), np.int64)
    tt, tp = np.zeros((B, k), np.int64), np.zeros((B, k), np.int64)
    labels = np.zeros(B, np.int64)
    for b, r in enumerate(rules):
        if len(r.source) > k or len(r.target) > k:
            raise ValueError(f"rule (sid={r.sid}, t={r.t}) has more than k={k} words on a side")
        for j, (tok, pos) in enumerate(r.source):
            st[b, j], sp[b, j] = tok, min(pos, max_pos)
        for j, (tok, pos) in enumerate(r.target):
            tt[b, j], tp[b, j] = tok, min(pos, max_pos)
        labels[b] = r.label
    return RuleBatch(st, sp, tt, tp, labels)


def _normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


class ProxyModel:
    """``Q(y | W)``: a classifier over the target vocabulary from a rule's words."""

    kind = ""

    def __init__(self, k: int, src_vocab_size: int, tgt_vocab_size: int, emb_dim: int = 64,
                 hidden_dim: int = 128, fn_width: int = 256, max_pos: int = 64, seed: int = 0,
                 dropout: float = 0.0):
        self.k = k
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.fn_width = fn_width
        self.max_pos = max_pos
        self.seed = seed
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.dropout = dropout
        self._drop_rng = np.random.default_rng(seed + 1)
        self.params: dict[str, np.ndarray] = {}
        self.history: list[tuple[int, float, float]] = []
        self._init(np.random.default_rng(seed))

    def _init(self, rng):
        raise NotImplementedError

    def logits(self, g: Graph, batch: RuleBatch, train: bool = False) -> Tensor:
        raise NotImplementedError

    def bind(self, g, train):
        return {n: g.param(n, a, requires_grad=train) for n, a in self.params.items()}

    def _drop(self, g, x, train):
        """Inverted dropout, active only while training; masks come from a seeded stream."""
        if not train or self.dropout == 0.0:
            return x
        keep = self._drop_rng.random(x.shape) >= self.dropout
        return x * g.constant(keep.astype(np.float32) / (1.0 - self.dropout))

    def encode(self, rules: Sequence[RuleInstance]) -> RuleBatch:
        batch = encode_rules(rules, self.k, self.max_pos)
        if batch.src_tok.max(initial=0) >= self.src_vocab_size or \
                batch.tgt_tok.max(initial=0) >= self.tgt_vocab_size or \
                batch.labels.max(initial=0) >= self.tgt_vocab_size:
            raise ValueError("rule token ids fall outside the proxy's vocabularies")
        return batch

    def header(self) -> dict:
        return {"type": "proxy", "kind": self.kind, "k": self.k,
                "src_vocab_size": self.src_vocab_size, "tgt_vocab_size": self.tgt_vocab_size,
                "emb_dim": self.emb_dim, "hidden_dim": self.hidden_dim,
                "fn_width": self.fn_width, "max_pos": self.max_pos, "seed": self.seed,
                "dropout": self.dropout}

    # slot representation shared by RN and SA: word + position + side embeddings
    def _slots(self, g, P, batch):
        tok = g.concat([g.embedding(P["src_emb"], batch.src_tok),
                        g.embedding(P["tgt_emb"], batch.tgt_tok)], axis=1)
        pos = g.embedding(P["pos_emb"], np.concatenate([batch.src_pos, batch.tgt_pos], axis=1))
        sides = np.repeat([[0] * self.k + [1] * self.k], len(batch.labels), axis=0)
        return tok + pos + g.embedding(P["side_emb"], sides)

    def _init_slots(self, rng):
        E = self.emb_dim
        self.params["src_emb"] = _normal(rng, (self.src_vocab_size, E), E)
        self.params["tgt_emb"] = _normal(rng, (self.tgt_vocab_size, E), E)
        self.params["pos_emb"] = _normal(rng, (self.max_pos + 1, E), E)
        self.params["side_emb"] = _normal(rng, (2, E), E)

    def _init_pool(self, rng, D):
        p = self.params
        p["pool_W"] = _normal(rng, (D, D), D)
        p["pool_query"] = _normal(rng, (D, 1), D)     # s_0
        p["out_W"] = _normal(rng, (D, self.hidden_dim), D)
        p["out_b"] = _zeros(self.hidden_dim)
        p["proj_W"] = _normal(rng, (self.hidden_dim, self.tgt_vocab_size), self.hidden_dim)
        p["proj_b"] = _zeros(self.tgt_vocab_size)

    def _pool(self, g, P, h, mask):
        """Attention pooling of slot states with the learned query ``s_0``."""
        B, L, D = h.shape
        e = ((h @ P["pool_W"]) @ P["pool_query"]).reshape(B, L)
        alpha = g.softmax(g.masked_fill(e, ~mask, NEG_INF))
        s = (alpha.reshape(B, 1, L) @ h).reshape(B, D)
        out = g.tanh(s @ P["out_W"] + P["out_b"])
        return out @ P["proj_W"] + P["proj_b"], alpha


class FNProxy(ProxyModel):
    """Bag of selected words per side through three fully connected layers."""

    kind = "FN"

    def _init(self, rng):
        E, W = self.emb_dim, self.fn_width
        p = self.params
        p["src_emb"] = _normal(rng, (self.src_vocab_size, E), E)
        p["tgt_emb"] = _normal(rng, (self.tgt_vocab_size, E), E)
        p["fc1_W"] = _normal(rng, (2 * E, W), 2 * E)
        p["fc1_b"] = _zeros(W)
        p["fc2_W"] = _normal(rng, (W, W), W)
        p["fc2_b"] = _zeros(W)
        p["proj_W"] = _normal(rng, (W, self.tgt_vocab_size), W)
        p["proj_b"] = _zeros(self.tgt_vocab_size)

    @staticmethod
    def _counts(tokens, size):
        counts = np.zeros((tokens.shape[0], size), dtype=np.float32)
        rows = np.repeat(np.arange(tokens.shape[0]), tokens.shape[1])
        np.add.at(counts, (rows, tokens.reshape(-1)), 1.0)
        counts[:, PAD] = 0.0
        return counts

    def logits(self, g, batch, train=False):
        P = self.bind(g, train)
        # count vectors make the bag exactly order-free
        src_bag = g.constant(self._counts(batch.src_tok, self.src_vocab_size)) @ P["src_emb"]
        tgt_bag = g.constant(self._counts(batch.tgt_tok, self.tgt_vocab_size)) @ P["tgt_emb"]
        x = self._drop(g, g.concat([src_bag, tgt_bag]), train)
        h = self._drop(g, g.relu(x @ P["fc1_W"] + P["fc1_b"]), train)
        h = self._drop(g, g.relu(h @ P["fc2_W"] + P["fc2_b"]), train)
        return h @ P["proj_W"] + P["proj_b"]


class RNProxy(ProxyModel):
    """Bidirectional LSTM over the 2k slots, attention-pooled."""

    kind = "RN"

    def _init(self, rng):
        E, He = self.emb_dim, self.hidden_dim // 2
        self._init_slots(rng)
        for d in ("fwd", "bwd"):
            self.params[f"lstm_{d}_W"] = _normal(rng, (E, 4 * He), E)
            self.params[f"lstm_{d}_U"] = _normal(rng, (He, 4 * He), He)
            b = _zeros(4 * He)
            b[He:2 * He] = 1.0
            self.params[f"lstm_{d}_b"] = b
        self._init_pool(rng, 2 * He)

    def logits(self, g, batch, train=False):
        P = self.bind(g, train)
        x = self._drop(g, self._slots(g, P, batch), train)
        mask = batch.mask
        B, L = mask.shape
        He = self.hidden_dim // 2
        states = {}
        for d, order in (("fwd", range(L)), ("bwd", range(L - 1, -1, -1))):
            h = g.constant(np.zeros((B, He)))
            c = g.constant(np.zeros((B, He)))
            outs = [None] * L
            for i in order:
                hn, cn = g.lstm_cell(x[:, i], h, c, P[f"lstm_{d}_W"], P[f"lstm_{d}_U"],
                                     P[f"lstm_{d}_b"])
                m = mask[:, i:i + 1].astype(np.float32)
                if m.all():
                    h, c = hn, cn
                else:
                    mt = g.constant(m)
                    h = h + mt * (hn - h)
                    c = c + mt * (cn - c)
                outs[i] = h.reshape(B, 1, He)
            states[d] = g.concat(outs, axis=1)
        hs = g.concat([states["fwd"], states["bwd"]])
        return self._pool(g, P, self._drop(g, hs, train), mask)[0]


class SAProxy(ProxyModel):
    """Self-attention encoder (``layers`` blocks, one head) over the 2k slots, attention-pooled."""

    kind = "SA"

    def __init__(self, *args, layers: int = 1, **kwargs):
        if layers < 1:
            raise ValueError("SA proxy needs at least one layer")
        self.layers = layers
        super().__init__(*args, **kwargs)

    def header(self) -> dict:
        return {**super().header(), "layers": self.layers}

    @staticmethod
    def _name(base, layer):
        return base if layer == 0 else f"{base}{layer}"

    def _init(self, rng):
        E, F = self.emb_dim, self.hidden_dim
        self._init_slots(rng)
        p = self.params
        for layer in range(self.layers):
            n = lambda base: self._name(base, layer)
            for m in ("q", "k", "v", "o"):
                p[n(f"att_{m}")] = _normal(rng, (E, E), E)
            p[n("ln1_g")], p[n("ln1_b")] = np.ones(E, np.float32), _zeros(E)
            p[n("ffn_W1")], p[n("ffn_b1")] = _normal(rng, (E, F), E), _zeros(F)
            p[n("ffn_W2")], p[n("ffn_b2")] = _normal(rng, (F, E), F), _zeros(E)
            p[n("ln2_g")], p[n("ln2_b")] = np.ones(E, np.float32), _zeros(E)
        self._init_pool(rng, E)

    def logits(self, g, batch, train=False):
        P = self.bind(g, train)
        h = self._drop(g, self._slots(g, P, batch), train)
        mask = batch.mask
        B, L = mask.shape
        blocked = np.broadcast_to(~mask[:, None, :], (B, L, L))
        for layer in range(self.layers):
            W = lambda base: P[self._name(base, layer)]
            q, k, v = h @ W("att_q"), h @ W("att_k"), h @ W("att_v")
            scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.emb_dim))
            alpha = g.softmax(g.masked_fill(scores, blocked, NEG_INF))
            h = g.layernorm(h + (alpha @ v) @ W("att_o"), W("ln1_g"), W("ln1_b"))
            ff = g.relu(h @ W("ffn_W1") + W("ffn_b1")) @ W("ffn_W2") + W("ffn_b2")
            h = g.layernorm(h + ff, W("ln2_g"), W("ln2_b"))
        return self._pool(g, P, self._drop(g, h, train), mask)[0]


class BaselineProxy:
    """The frozen NMT model itself, with every unselected context word zeroed."""

    kind = BASELINE

    def __init__(self, nmt: NmtModel):
        self.nmt = nmt


def make_proxy(kind: str, k: int, src_vocab_size: int, tgt_vocab_size: int,
               **kwargs) -> ProxyModel:
    classes = {"FN": FNProxy, "RN": RNProxy, "SA": SAProxy}
    if kind not in classes:
        raise ValueError(f"unknown proxy kind {kind!r}; expected one of {PROXY_KINDS}")
    if kind != "SA":
        kwargs.pop("layers", None)          # family-wide options may carry SA-only settings
    return classes[kind](k, src_vocab_size, tgt_vocab_size, **kwargs)


def proxy_forward(q: ProxyModel, rule: RuleInstance) -> np.ndarray:
    """``Q(. | W)`` for one rule."""
    g = Graph()
    return g.softmax(q.logits(g, q.encode([rule]))).data[0]


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------

@dataclass
class ProxyTrainConfig:
    epochs: int = 30
    patience: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float = 5.0
    valid_fraction: float = 0.1
    seed: int = 0
    log_path: str | None = None


def _nll_loss(q, g, rules, train):
    batch = q.encode(rules)
    lp = g.pick(g.log(g.softmax(q.logits(g, batch, train))), batch.labels)
    return -g.mean(lp)


def train_proxy(q: ProxyModel, train_rules: RuleDataset | Sequence[RuleInstance],
                config: ProxyTrainConfig | None = None) -> ProxyModel:
    """Minimize the rules' label NLL with minibatch Adam; keep the best-validation weights.

    ``q.history`` records ``(epoch, train_nll, valid_ppl)``; epoch 0 is the
    untrained model.
    """
    if isinstance(q, BaselineProxy) or getattr(q, "kind", None) == BASELINE:
        raise ValueError("the masked-model baseline has no parameters to train")
    config = config or ProxyTrainConfig()
    rules = train_rules.rules if isinstance(train_rules, RuleDataset) else list(train_rules)
    if not rules:
        raise ValueError("no training rules")
    train, valid = split_corpus(rules, config.valid_fraction, config.seed)
    if not valid:
        valid = train
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed + 7)
    best_ppl = ppl_on_rules(q, valid)
    best, stale = {k: v.copy() for k, v in q.params.items()}, 0
    history = [(0, float("nan"), best_ppl)]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        tot, n = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            chunk = [train[j] for j in order[i:i + config.batch_size]]
            g = Graph()
            loss = _nll_loss(q, g, chunk, train=True)
            if not np.isfinite(loss.data).all():
                raise TrainingDiverged(epoch)
            g.backward(loss)
            grads = g.param_grads()
            clip_gradients(grads, config.clip_norm)
            opt.step(q.params, grads)
            tot += float(loss.data[0]) * len(chunk)
            n += len(chunk)
        valid_ppl = ppl_on_rules(q, valid)
        history.append((epoch, tot / n, valid_ppl))
        logger.debug("%s epoch %d train nll %.4f valid ppl %.4f", q.kind, epoch, tot / n, valid_ppl)
        if valid_ppl < best_ppl:
            best_ppl, best, stale = valid_ppl, {k: v.copy() for k, v in q.params.items()}, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    q.params = best
    q.history = history
    if config.log_path:
        with open(config.log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "valid_ppl"])
            w.writerows(history)
    return q


def rule_nlls(q, rules: RuleDataset | Sequence[RuleInstance], batch_size: int = 1024) -> np.ndarray:
    """Per-rule ``-log Q(label | W)``, clamped at ``-log 1e-12``."""
    if isinstance(q, BaselineProxy):
        if not isinstance(rules, RuleDataset):
            raise ValueError("the baseline needs a RuleDataset carrying context provenance")
        return baseline_nlls(q.nmt, rules)
    items = rules.rules if isinstance(rules, RuleDataset) else list(rules)
    out = np.empty(len(items), dtype=np.float64)
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        g = Graph()
        batch = q.encode(chunk)
        lp = g.log(g.softmax(q.logits(g, batch))).data
        out[i:i + len(chunk)] = -lp[np.arange(len(chunk)), batch.labels]
    return np.minimum(out, MAX_NLL)


def ppl_from_nlls(nlls: np.ndarray) -> float:
    nlls = np.asarray(nlls, dtype=np.float64)
    if nlls.size == 0:
        raise ValueError("perplexity of an empty rule set is undefined")
    return float(np.exp(np.minimum(nlls, MAX_NLL).mean()))


def ppl_on_rules(q, test_rules) -> float:
    """``exp`` of the mean clamped NLL over the rules."""
    n = len(test_rules.rules if isinstance(test_rules, RuleDataset) else test_rules)
    if n == 0:
        raise ValueError("perplexity of an empty rule set is undefined")
    return ppl_from_nlls(rule_nlls(q, test_rules))


def baseline_nlls(nmt: NmtModel, rules: RuleDataset, batch_size: int = 512) -> np.ndarray:
    """Per-rule NLL of the rule label under the NMT model with unselected words zeroed."""
    missing = {r.sid for r in rules.rules} - set(rules.sequences)
    if missing:
        raise ValueError(f"no context provenance for sentences {sorted(missing)[:5]}")
    out = np.empty(len(rules.rules), dtype=np.float64)
    for i in range(0, len(rules.rules), batch_size):
        chunk = rules.rules[i:i + batch_size]
        xs, ys, sk, tk = [], [], [], []
        for r in chunk:
            x, y = rules.sequences[r.sid]
            xs.append(x)
            ys.append(y[:r.t - 1])
            keep = np.zeros(len(x), dtype=bool)
            keep[[p - 1 for _, p in r.source]] = True
            sk.append(keep)
            keep = np.zeros(r.t, dtype=bool)
            keep[0] = True                                   # BOS is not a context word
            keep[[p for _, p in r.target]] = True
            tk.append(keep)
        src = pad_batch(xs)
        tgt_in = pad_batch(ys, prefix=BOS)
        src_keep = np.zeros(src.shape, dtype=bool)
        tgt_keep = np.zeros(tgt_in.shape, dtype=bool)
        for b in range(len(chunk)):
            src_keep[b, :len(sk[b])] = sk[b]
            tgt_keep[b, :len(tk[b])] = tk[b]
        g = Graph()
        fw = nmt.run(g, src, tgt_in, src_keep, tgt_keep)
        lp = g.log(g.softmax(fw.logits)).data
        rows = np.arange(len(chunk))
        steps = np.array([r.t - 1 for r in chunk])
        labels = np.array([r.label for r in chunk])
        out[i:i + len(chunk)] = -lp[rows, steps, labels]
    return np.minimum(out, MAX_NLL)


def baseline_score(nmt: NmtModel, test_rules: RuleDataset) -> float:
    """Perplexity of the masked NMT model on the test rules; nothing is trained."""
    return ppl_from_nlls(baseline_nlls(nmt, test_rules))


# --------------------------------------------------------------------------
# the metric
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    method: str
    k: int
    scenario: str
    family: list[str]
    per_proxy_ppl: dict[str, float]
    metric_ppl: float
    winner: str
    n_train: int
    n_test: int
    seed: int
    proxies: dict = field(default_factory=dict, repr=False, compare=False)
    nlls: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"method": self.method, "k": self.k, "scenario": self.scenario,
                "family": list(self.family), "per_proxy_ppl": dict(self.per_proxy_ppl),
                "metric_ppl": self.metric_ppl, "winner": self.winner,
                "n_train": self.n_train, "n_test": self.n_test, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["method"], d["k"], d["scenario"], list(d["family"]),
                   dict(d["per_proxy_ppl"]), d["metric_ppl"], d["winner"],
                   d["n_train"], d["n_test"], d["seed"])


def resolve_family(family) -> list[str]:
    if isinstance(family, str):
        if family in FAMILIES:
            return list(FAMILIES[family])
        if family == BASELINE:
            return [BASELINE]
        raise ValueError(f"unknown family preset {family!r}")
    kinds = [f.kind if hasattr(f, "kind") else f for f in family]
    if not kinds:
        raise ValueError("empty proxy family")
    for k in kinds:
        if k not in PROXY_KINDS and k != BASELINE:
            raise ValueError(f"unknown proxy kind {k!r}")
    return kinds


def proxy_seed(seed: int, kind: str) -> int:
    """Per-kind seed, so a member trains identically alone or inside a larger family."""
    return seed * 1000 + _SEED_OFFSET[kind]


def _check_meta(train_rules: RuleDataset, test_rules: RuleDataset) -> None:
    for key in ("method", "k", "scenario"):
        a, b = train_rules.meta.get(key), test_rules.meta.get(key)
        if a != b:
            raise ValueError(f"train/test rule sets disagree on {key}: {a!r} vs {b!r}")


def metric_score(family, train_rules: RuleDataset, test_rules: RuleDataset,
                 train_config: ProxyTrainConfig | None = None, seed: int = 0,
                 nmt: NmtModel | None = None, proxy_kwargs: dict | None = None,
                 check_meta: bool = True) -> MetricReport:
    """Train every trainable family member, score all on the test rules, take the minimum.

    ``family`` is a preset name (``FN``, ``RN``, ``SA``, ``Comb``) or a list of
    kinds; ``baseline-masked`` members need ``nmt``.
    """
    kinds = resolve_family(family)
    if check_meta:
        _check_meta(train_rules, test_rules)
    if len(test_rules) == 0:
        raise ValueError("empty test rule set")
    k = int(train_rules.meta.get("k", 1))
    sizes = (train_rules.meta.get("src_vocab_size"), train_rules.meta.get("tgt_vocab_size"))
    if nmt is not None:
        sizes = (len(nmt.src_vocab), len(nmt.tgt_vocab))
    base = train_config or ProxyTrainConfig()
    ppl, proxies, nlls = {}, {}, {}
    for kind in kinds:
        if kind == BASELINE:
            if nmt is None:
                raise ValueError("baseline member requires the NMT model")
            q = BaselineProxy(nmt)
        else:
            if None in sizes:
                raise ValueError("vocabulary sizes unknown: pass nmt or set them in rule meta")
            s = proxy_seed(seed, kind)
            q = make_proxy(kind, k, sizes[0], sizes[1], seed=s, **(proxy_kwargs or {}))
            cfg = ProxyTrainConfig(**{**asdict(base), "seed": s})
            train_proxy(q, train_rules, cfg)
        nlls[kind] = rule_nlls(q, test_rules)
        ppl[kind] = ppl_from_nlls(nlls[kind])
        proxies[kind] = q
    winner = min(kinds, key=lambda kd: (ppl[kd], kinds.index(kd)))
    return MetricReport(
        method=train_rules.meta.get("method", ""), k=k,
        scenario=test_rules.meta.get("scenario", ""), family=kinds, per_proxy_ppl=ppl,
        metric_ppl=ppl[winner], winner=winner, n_train=len(train_rules),
        n_test=len(test_rules), seed=seed, proxies=proxies, nlls=nlls)


def evaluate_family(proxies: dict, test_rules: RuleDataset) -> dict[str, np.ndarray]:
    """Per-rule NLLs of already-trained proxies, e.g. on another scenario's rules."""
    return {kind: rule_nlls(q, test_rules) for kind, q in proxies.items()}


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_proxy(q: ProxyModel, path) -> None:
    save_checkpoint(path, q.params, q.header())


def load_proxy(path) -> ProxyModel:
    params, meta = load_checkpoint(path)
    if meta.get("type") != "proxy":
        raise ValueError(f"{path} is not a proxy checkpoint")
    q = make_proxy(meta["kind"], meta["k"], meta["src_vocab_size"], meta["tgt_vocab_size"],
                   emb_dim=meta["emb_dim"], hidden_dim=meta["hidden_dim"],
                   fn_width=meta["fn_width"], max_pos=meta["max_pos"], seed=meta["seed"],
                   dropout=meta.get("dropout", 0.0),
                   **({"layers": meta["layers"]} if "layers" in meta else {}))
    q.params = params
    return q
