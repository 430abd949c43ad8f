"""Target NMT models: RNN-Search and a one-layer, one-head transformer.

Both models expose :meth:`NmtModel.run`, a batched teacher-forced pass that
also returns the embedding-lookup tensors (so callers can read per-word
gradients or zero single word embeddings) and the attention weights.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import NEG_INF, Adam, Graph, Tensor, load_checkpoint, save_checkpoint
from .data import BOS, EOS, PAD, Context, SentencePair, Vocab, pad_batch

logger = logging.getLogger(__name__)

KINDS = ("rnn-search", "transformer")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became NaN during epoch {epoch}")
        self.epoch = epoch


@dataclass
class Forward:
    logits: Tensor            # (B, T, V)
    src_emb: Tensor           # (B, S, E) embedding-lookup outputs
    tgt_emb: Tensor           # (B, T, E), T counts BOS
    states: Tensor            # decoder states s_t, (B, T, D)
    cross_attn: np.ndarray    # (B, T, S)
    self_attn: np.ndarray | None = None  # (B, T, T); key 0 (BOS) is never attended


def _normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


def _ones(*shape):
    return np.ones(shape, dtype=np.float32)


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = 1.0 / 10000 ** (2 * (np.arange(dim) // 2) / dim)
    ang = pos * rates[None, :]
    table = np.where(np.arange(dim) % 2 == 0, np.sin(ang), np.cos(ang))
    return table.astype(np.float32)


def _stack(g: Graph, steps: list[Tensor], axis: int = 1) -> Tensor:
    parts = [s.reshape(s.shape[:axis] + (1,) + s.shape[axis:]) for s in steps]
    return parts[0] if len(parts) == 1 else g.concat(parts, axis=axis)


def _keep_mask(g: Graph, emb: Tensor, keep) -> Tensor:
    if keep is None:
        return emb
    keep = np.asarray(keep, dtype=bool)
    return g.masked_fill(emb, ~keep[..., None], 0.0)


class NmtModel:
    kind = ""

    def __init__(self, src_vocab: Vocab, tgt_vocab: Vocab, emb_dim: int = 64,
                 hidden_dim: int = 128, seed: int = 0):
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.history: list[tuple[int, float, float]] = []
        self._init(np.random.default_rng(seed))

    def _init(self, rng):
        raise NotImplementedError

    def bind(self, g: Graph, train: bool = False) -> dict[str, Tensor]:
        return {name: g.param(name, arr, requires_grad=train) for name, arr in self.params.items()}

    def run(self, g: Graph, src: np.ndarray, tgt_in: np.ndarray, src_keep=None,
            tgt_keep=None, train: bool = False) -> Forward:
        """Teacher-forced pass. ``tgt_in`` starts with BOS; row ``j`` of the
        output predicts the token after ``tgt_in[:, j]``. ``*_keep`` are
        boolean masks; False positions get a zero word embedding."""
        raise NotImplementedError

    def _check_ids(self, src, tgt_in):
        if src.size and (src.min() < 0 or src.max() >= len(self.src_vocab)):
            raise ValueError(f"source id out of range for vocab of size {len(self.src_vocab)}")
        if tgt_in.size and (tgt_in.min() < 0 or tgt_in.max() >= len(self.tgt_vocab)):
            raise ValueError(f"target id out of range for vocab of size {len(self.tgt_vocab)}")

    def header(self) -> dict:
        return {
            "kind": self.kind, "emb_dim": self.emb_dim, "hidden_dim": self.hidden_dim,
            "seed": self.seed,
            "src_vocab": self.src_vocab.itos[4:], "tgt_vocab": self.tgt_vocab.itos[4:],
            "src_vocab_sha256": self.src_vocab.content_hash(),
            "tgt_vocab_sha256": self.tgt_vocab.content_hash(),
        }

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


class RNNSearch(NmtModel):
    """Bidirectional LSTM encoder, LSTM decoder with additive source attention.

    The attention query at step ``t`` is the previous decoder state
    ``s_{t-1}``; the attended context feeds the LSTM update to ``s_t``.
    """

    kind = "rnn-search"

    def _init(self, rng):
        E, H = self.emb_dim, self.hidden_dim
        He = H // 2
        Vs, Vt = len(self.src_vocab), len(self.tgt_vocab)
        p = self.params
        p["src_emb"] = _normal(rng, (Vs, E), 1)
        p["tgt_emb"] = _normal(rng, (Vt, E), 1)
        for d in ("fwd", "bwd"):
            p[f"enc_{d}_W"] = _normal(rng, (E, 4 * He), E)
            p[f"enc_{d}_U"] = _normal(rng, (He, 4 * He), He)
            p[f"enc_{d}_b"] = _zeros(4 * He)
            p[f"enc_{d}_b"][He:2 * He] = 1.0  # forget-gate bias
        p["init_W"] = _normal(rng, (2 * He, H), 2 * He)
        p["init_b"] = _zeros(H)
        p["att_q"] = _normal(rng, (H, H), H)
        p["att_k"] = _normal(rng, (2 * He, H), 2 * He)
        p["att_v"] = _normal(rng, (H, 1), H)
        p["dec_W"] = _normal(rng, (E + 2 * He, 4 * H), E + 2 * He)
        p["dec_U"] = _normal(rng, (H, 4 * H), H)
        p["dec_b"] = _zeros(4 * H)
        p["dec_b"][H:2 * H] = 1.0
        p["out_W"] = _normal(rng, (H + 2 * He, H), H + 2 * He)
        p["out_b"] = _zeros(H)
        p["proj_W"] = _normal(rng, (H, Vt), H)
        p["proj_b"] = _zeros(Vt)

    def _encode_dir(self, g, P, x, valid, d, reverse):
        B, S, _ = x.shape
        He = self.hidden_dim // 2
        h = g.constant(np.zeros((B, He)))
        c = g.constant(np.zeros((B, He)))
        outs = [None] * S
        order = range(S - 1, -1, -1) if reverse else range(S)
        for i in order:
            hn, cn = g.lstm_cell(x[:, i], h, c, P[f"enc_{d}_W"], P[f"enc_{d}_U"], P[f"enc_{d}_b"])
            m = valid[:, i:i + 1]
            if m.all():
                h, c = hn, cn
            else:
                mt = g.constant(m)
                h = h + mt * (hn - h)
                c = c + mt * (cn - c)
            outs[i] = h
        return outs

    def run(self, g, src, tgt_in, src_keep=None, tgt_keep=None, train=False):
        src = np.asarray(src)
        tgt_in = np.asarray(tgt_in)
        self._check_ids(src, tgt_in)
        P = self.bind(g, train)
        B, S = src.shape
        T = tgt_in.shape[1]
        valid = (src != PAD).astype(np.float32)
        src_emb = g.embedding(P["src_emb"], src)
        tgt_emb = g.embedding(P["tgt_emb"], tgt_in)
        xs = _keep_mask(g, src_emb, src_keep)
        ys = _keep_mask(g, tgt_emb, tgt_keep)

        fwd = self._encode_dir(g, P, xs, valid, "fwd", reverse=False)
        bwd = self._encode_dir(g, P, xs, valid, "bwd", reverse=True)
        h = _stack(g, [g.concat([f, b]) for f, b in zip(fwd, bwd)])  # (B, S, 2He)

        lengths = valid.sum(1, keepdims=True)
        pooled = g.sum(h * g.constant(valid[..., None]), axis=1) * g.constant(1.0 / lengths)
        s = g.tanh(pooled @ P["init_W"] + P["init_b"])
        c = g.constant(np.zeros((B, self.hidden_dim)))
        keys = h @ P["att_k"]                                  # (B, S, H)
        pad_mask = np.broadcast_to((src == PAD)[:, :, None], (B, S, 1))

        outs, states, alphas = [], [], []
        for t in range(T):
            q = (s @ P["att_q"]).reshape(B, 1, self.hidden_dim)
            e = g.tanh(keys + q) @ P["att_v"]                 # (B, S, 1)
            e = g.masked_fill(e, pad_mask, NEG_INF).reshape(B, S)
            alpha = g.softmax(e)
            alphas.append(alpha.data)
            ctx = (alpha.reshape(B, 1, S) @ h).reshape(B, h.shape[-1])
            s, c = g.lstm_cell(g.concat([ys[:, t], ctx]), s, c,
                               P["dec_W"], P["dec_U"], P["dec_b"])
            states.append(s)
            outs.append(g.tanh(g.concat([s, ctx]) @ P["out_W"] + P["out_b"]))
        o = _stack(g, outs)
        logits = o @ P["proj_W"] + P["proj_b"]
        return Forward(logits, src_emb, tgt_emb, _stack(g, states),
                       np.stack(alphas, axis=1), None)


class Transformer(NmtModel):
    """One encoder layer and one decoder layer, a single attention head each.

    Residual connections and post-layer-norm are included. The decoder
    self-attention at input position ``j`` attends over positions ``1..j``
    (the prefix words, excluding the BOS slot); position 0 has no keys and
    contributes a zero attention output.
    """

    kind = "transformer"

    def _init(self, rng):
        d, F = self.emb_dim, self.hidden_dim
        Vs, Vt = len(self.src_vocab), len(self.tgt_vocab)
        p = self.params
        p["src_emb"] = _normal(rng, (Vs, d), d)
        p["tgt_emb"] = _normal(rng, (Vt, d), d)
        for block in ("enc_self", "dec_self", "dec_cross"):
            for m in ("q", "k", "v", "o"):
                p[f"{block}_{m}"] = _normal(rng, (d, d), d)
            p[f"{block}_ln_g"] = _ones(d)
            p[f"{block}_ln_b"] = _zeros(d)
        for block in ("enc_ffn", "dec_ffn"):
            p[f"{block}_W1"] = _normal(rng, (d, F), d)
            p[f"{block}_b1"] = _zeros(F)
            p[f"{block}_W2"] = _normal(rng, (F, d), F)
            p[f"{block}_b2"] = _zeros(d)
            p[f"{block}_ln_g"] = _ones(d)
            p[f"{block}_ln_b"] = _zeros(d)
        p["proj_W"] = _normal(rng, (d, Vt), d)
        p["proj_b"] = _zeros(Vt)

    def _attend(self, g, P, block, query, memory, blocked):
        d = self.emb_dim
        q = query @ P[f"{block}_q"]
        k = memory @ P[f"{block}_k"]
        v = memory @ P[f"{block}_v"]
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))
        scores = g.masked_fill(scores, blocked, NEG_INF)
        alpha = g.softmax(scores)
        return (alpha @ v) @ P[f"{block}_o"], alpha

    def _ffn(self, g, P, block, x):
        hid = g.relu(x @ P[f"{block}_W1"] + P[f"{block}_b1"])
        out = hid @ P[f"{block}_W2"] + P[f"{block}_b2"]
        return g.layernorm(x + out, P[f"{block}_ln_g"], P[f"{block}_ln_b"])

    def run(self, g, src, tgt_in, src_keep=None, tgt_keep=None, train=False):
        src = np.asarray(src)
        tgt_in = np.asarray(tgt_in)
        self._check_ids(src, tgt_in)
        P = self.bind(g, train)
        d = self.emb_dim
        B, S = src.shape
        T = tgt_in.shape[1]
        pe = sinusoid_table(max(S, T), d)
        scale = math.sqrt(d)

        src_emb = g.embedding(P["src_emb"], src)
        tgt_emb = g.embedding(P["tgt_emb"], tgt_in)
        xs = _keep_mask(g, src_emb, src_keep) * scale + pe[:S]
        ys = _keep_mask(g, tgt_emb, tgt_keep) * scale + pe[:T]

        key_pad = (src == PAD)[:, None, :]                      # (B, 1, S)
        a, _ = self._attend(g, P, "enc_self", xs, xs, np.broadcast_to(key_pad, (B, S, S)))
        h = g.layernorm(xs + a, P["enc_self_ln_g"], P["enc_self_ln_b"])
        h = self._ffn(g, P, "enc_ffn", h)

        qi = np.arange(T)[:, None]
        ki = np.arange(T)[None, :]
        blocked = (ki > qi) | (ki == 0)
        a, self_alpha = self._attend(g, P, "dec_self", ys, ys, np.broadcast_to(blocked, (B, T, T)))
        has_key = (~blocked).any(axis=1).astype(np.float32)[None, :, None]
        if not has_key.all():
            a = a * g.constant(has_key)
        s_half = g.layernorm(ys + a, P["dec_self_ln_g"], P["dec_self_ln_b"])
        c, cross_alpha = self._attend(g, P, "dec_cross", s_half, h,
                                      np.broadcast_to(key_pad, (B, T, S)))
        s = g.layernorm(s_half + c, P["dec_cross_ln_g"], P["dec_cross_ln_b"])
        s = self._ffn(g, P, "dec_ffn", s)
        logits = s @ P["proj_W"] + P["proj_b"]
        self_att = self_alpha.data * np.broadcast_to(has_key, (1, T, 1))
        return Forward(logits, src_emb, tgt_emb, s, cross_alpha.data, self_att)


def make_model(kind: str, src_vocab: Vocab, tgt_vocab: Vocab, emb_dim: int = 64,
               hidden_dim: int = 128, seed: int = 0) -> NmtModel:
    classes = {"rnn-search": RNNSearch, "transformer": Transformer}
    if kind not in classes:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    return classes[kind](src_vocab, tgt_vocab, emb_dim, hidden_dim, seed)


# --------------------------------------------------------------------------
# single decision point
# --------------------------------------------------------------------------

@dataclass
class NmtOutput:
    dist: np.ndarray                 # (V,)
    cross_attn: np.ndarray           # (|x|,)
    self_attn: np.ndarray | None     # (t-1,), transformer only
    state: np.ndarray                # s_t


def context_arrays(ctx: Context):
    src = np.asarray([ctx.x], dtype=np.int64)
    tgt_in = np.asarray([(BOS,) + ctx.prefix], dtype=np.int64)
    return src, tgt_in


def nmt_forward(model: NmtModel, ctx: Context, src_keep=None, tgt_keep=None) -> NmtOutput:
    """``P(. | c_t)`` plus the attention weights at the decision point.

    ``src_keep`` (length |x|) and ``tgt_keep`` (length t-1) are optional
    boolean masks; False zeroes that word's embedding.
    """
    src, tgt_in = context_arrays(ctx)
    tk = None
    if tgt_keep is not None:
        tk = np.concatenate([[True], np.asarray(tgt_keep, dtype=bool)])[None]
    sk = None if src_keep is None else np.asarray(src_keep, dtype=bool)[None]
    g = Graph()
    fw = model.run(g, src, tgt_in, sk, tk)
    last = ctx.t - 1
    dist = g.softmax(fw.logits[:, last]).data[0]
    self_attn = None
    if fw.self_attn is not None:
        self_attn = fw.self_attn[0, last, 1:ctx.t]
    return NmtOutput(dist, fw.cross_attn[0, last], self_attn, fw.states.data[0, last])


def predict(model: NmtModel, ctx: Context) -> int:
    """``f(c_t)``: the model's argmax token."""
    return int(np.argmax(nmt_forward(model, ctx).dist))


def token_log_probs(model: NmtModel, pairs: Sequence[SentencePair]) -> list[np.ndarray]:
    """Teacher-forced ``log P(y_t | c_t)`` for every target token of each pair."""
    if not pairs:
        return []
    g = Graph()
    src = pad_batch([p.x for p in pairs])
    tgt_in = pad_batch([p.y[:-1] for p in pairs], prefix=BOS)
    tgt_out = pad_batch([p.y for p in pairs])
    fw = model.run(g, src, tgt_in)
    lp = g.pick(g.log(g.softmax(fw.logits)), tgt_out).data
    return [lp[i, :len(p.y)] for i, p in enumerate(pairs)]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class NmtTrainConfig:
    kind: str = "transformer"
    emb_dim: int = 64
    hidden_dim: int = 128
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float = 5.0
    valid_fraction: float = 0.1
    seed: int = 0
    log_path: str | None = None


def _batch_loss(model, g, batch, train):
    src = pad_batch([p.x for p in batch])
    tgt_in = pad_batch([p.y[:-1] for p in batch], prefix=BOS)
    tgt_out = pad_batch([p.y for p in batch])
    fw = model.run(g, src, tgt_in, train=train)
    nll = -g.pick(g.log(g.softmax(fw.logits)), tgt_out)
    mask = (tgt_out != PAD).astype(np.float32)
    total = g.sum(nll * g.constant(mask))
    return total, float(mask.sum()), fw, tgt_out


def corpus_nll(model: NmtModel, pairs: Sequence[SentencePair], batch_size: int = 256) -> float:
    """Mean per-token NLL under teacher forcing."""
    total, count = 0.0, 0.0
    for i in range(0, len(pairs), batch_size):
        g = Graph()
        loss, n, _, _ = _batch_loss(model, g, pairs[i:i + batch_size], train=False)
        total += float(loss.data.sum())
        count += n
    return total / max(count, 1.0)


def token_accuracy(model: NmtModel, pairs: Sequence[SentencePair], batch_size: int = 256) -> float:
    """Teacher-forcing next-token accuracy."""
    hit, count = 0, 0
    for i in range(0, len(pairs), batch_size):
        g = Graph()
        _, _, fw, tgt_out = _batch_loss(model, g, pairs[i:i + batch_size], train=False)
        pred = fw.logits.data.argmax(-1)
        mask = tgt_out != PAD
        hit += int(((pred == tgt_out) & mask).sum())
        count += int(mask.sum())
    return hit / max(count, 1)


def split_corpus(pairs: Sequence, valid_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_valid = int(round(len(pairs) * valid_fraction))
    if valid_fraction > 0:
        n_valid = max(n_valid, 1)
    valid = [pairs[i] for i in sorted(order[:n_valid])]
    train = [pairs[i] for i in sorted(order[n_valid:])]
    return train, valid


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_nmt(pairs: Sequence[SentencePair], src_vocab: Vocab, tgt_vocab: Vocab,
              config: NmtTrainConfig | None = None) -> NmtModel:
    """Train by teacher forcing and return the best-validation-NLL checkpoint.

    ``model.history`` holds ``(epoch, train_nll, valid_nll)`` rows with epoch 0
    measured before any update; it is also written to ``config.log_path``.
    """
    config = config or NmtTrainConfig()
    train, valid = split_corpus(list(pairs), config.valid_fraction, config.seed)
    if not valid:
        valid = train
    model = make_model(config.kind, src_vocab, tgt_vocab, config.emb_dim,
                       config.hidden_dim, config.seed)
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    history = [(0, corpus_nll(model, train), corpus_nll(model, valid))]
    best_nll, best = history[0][2], model.copy_params()
    logger.info("epoch 0 train %.4f valid %.4f", history[0][1], history[0][2])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        tot, cnt = 0.0, 0.0
        for i in range(0, len(order), config.batch_size):
            batch = [train[j] for j in order[i:i + config.batch_size]]
            g = Graph()
            loss, n, _, _ = _batch_loss(model, g, batch, train=True)
            if not np.isfinite(loss.data).all():
                raise TrainingDiverged(epoch)
            g.backward(loss * (1.0 / n))
            grads = g.param_grads()
            clip_gradients(grads, config.clip_norm)
            opt.step(model.params, grads)
            tot += float(loss.data.sum())
            cnt += n
        valid_nll = corpus_nll(model, valid)
        if not math.isfinite(valid_nll):
            raise TrainingDiverged(epoch)
        history.append((epoch, tot / cnt, valid_nll))
        logger.info("epoch %d train %.4f valid %.4f", epoch, tot / cnt, valid_nll)
        if valid_nll < best_nll:
            best_nll, best = valid_nll, model.copy_params()
    model.params = best
    model.history = history
    if config.log_path:
        with open(config.log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "valid_nll"])
            w.writerows(history)
    return model


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

def greedy_decode(model: NmtModel, x: Sequence[int], max_len: int) -> list[int]:
    """Append argmax tokens until EOS or ``max_len`` tokens.

    A result whose last token is not EOS was truncated.
    """
    return greedy_decode_batch(model, [x], max_len)[0]


def greedy_decode_batch(model: NmtModel, xs: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    src = pad_batch(xs)
    B = len(xs)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        tgt_in = np.asarray([[BOS] + o for o in out], dtype=np.int64)
        g = Graph()
        fw = model.run(g, src, tgt_in)
        nxt = fw.logits.data[:, -1].argmax(-1)
        for i in range(B):
            # finished rows keep decoding into padding; only the tokens are discarded
            if not done[i]:
                out[i].append(int(nxt[i]))
                done[i] = nxt[i] == EOS
            else:
                out[i].append(EOS)
        if done.all():
            break
    result = []
    for o in out:
        if EOS in o:
            o = o[:o.index(EOS) + 1]
        result.append(o)
    truncated = sum(1 for o in result if o[-1] != EOS)
    if truncated:
        logger.info("%d of %d decodes hit max_len=%d", truncated, B, max_len)
    return result


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_model(model: NmtModel, path) -> None:
    save_checkpoint(path, model.params, {"type": "nmt", **model.header()})


def load_model(path) -> NmtModel:
    params, meta = load_checkpoint(path)
    if meta.get("type") != "nmt":
        raise ValueError(f"{path} is not an NMT checkpoint")
    src_vocab, tgt_vocab = Vocab(meta["src_vocab"]), Vocab(meta["tgt_vocab"])
    if src_vocab.content_hash() != meta["src_vocab_sha256"] or \
            tgt_vocab.content_hash() != meta["tgt_vocab_sha256"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    model = make_model(meta["kind"], src_vocab, tgt_vocab, meta["emb_dim"],
                       meta["hidden_dim"], meta["seed"])
    missing = set(model.params) ^ set(params)
    if missing:
        raise ValueError(f"{path}: parameter set mismatch: {sorted(missing)}")
    model.params = params
    return model
