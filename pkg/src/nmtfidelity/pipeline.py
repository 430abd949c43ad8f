"""Run configuration and end-to-end experiment orchestration.

A :class:`Pipeline` owns one NMT model and lazily computes relevance
vectors, rule datasets and metric reports for it, writing every artifact
under the configured output directory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import (DEFAULT_FRACTIONS, AERResult, StabilityTable, compute_aer,
                       derive_alignment, read_alignments, stability_from_reports)
from .data import SentencePair, build_vocab, encode_corpus, read_parallel, write_toy_corpus
from .explain import METHODS, dump_relevance
from .nmt import KINDS, NmtModel, NmtTrainConfig, load_model, save_model, train_nmt
from .proxy import (BASELINE, MetricReport, ProxyTrainConfig, baseline_nlls, evaluate_family,
                    metric_score, ppl_from_nlls, resolve_family, save_proxy)
from .rules import (SCENARIOS, DensityHistogram, RelevanceCache, RuleDataset, check_method,
                    density_histogram, explain_corpus, write_rules)

logger = logging.getLogger(__name__)

TRAIN_SCENARIO = "teacher-forcing"


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Every knob of a run. Files are flat ``key = value`` text; ``#`` starts a comment.

    List values are comma-separated. An empty ``nmt_checkpoint`` means the
    model is trained (or reused) at ``<out_dir>/nmt.ckpt``.
    """

    train_src: str = ""
    train_tgt: str = ""
    test_src: str = ""
    test_tgt: str = ""
    nmt_checkpoint: str = ""
    gold_alignment: str = ""
    out_dir: str = "run"
    model_kind: str = "transformer"
    emb_dim: int = 64
    hidden_dim: int = 128
    nmt_epochs: int = 10
    nmt_lr: float = 1e-3
    nmt_batch_size: int = 64
    max_len: int = 64
    min_freq: int = 1
    methods: tuple = METHODS
    k: int = 1
    ks: tuple = (1, 2, 3, 4)
    scenario: str = "teacher-forcing"
    family: str = "SA"
    seed: int = 0
    proxy_epochs: int = 30
    proxy_patience: int = 3
    proxy_lr: float = 1e-3
    proxy_batch_size: int = 64
    proxy_dropout: float = 0.0
    proxy_layers: int = 1
    sizes: tuple = ()
    fractions: tuple = DEFAULT_FRACTIONS
    resamples: int = 1000
    bootstrap_unit: str = "rule"
    density_split: str = "train"

    # element types of the tuple-valued keys
    _ITEM = {"methods": str, "ks": int, "sizes": int, "fractions": float}

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def parse_value(cls, key: str, text: str):
        if key not in cls.keys():
            raise KeyError(f"unknown config key {key!r}")
        text = text.strip()
        if key in cls._ITEM:
            conv = cls._ITEM[key]
            return tuple(conv(v.strip()) for v in text.split(",") if v.strip())
        default = getattr(cls, key)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        return type(default)(text)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = cls.parse_value(key, val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        cfg = cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)
        # relative paths in a config file are relative to the file
        base = Path(path).resolve().parent
        for key in ("train_src", "train_tgt", "test_src", "test_tgt", "nmt_checkpoint",
                    "gold_alignment", "out_dir"):
            val = getattr(cfg, key)
            if val and not Path(val).is_absolute() and key not in overrides:
                setattr(cfg, key, str(base / val))
        return cfg

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            val = getattr(self, key)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    def validate(self) -> "RunConfig":
        for key in ("train_src", "train_tgt", "test_src", "test_tgt"):
            if not getattr(self, key):
                raise ValueError(f"config key {key} is required")
        for key in ("train_src", "train_tgt", "test_src", "test_tgt", "nmt_checkpoint",
                    "gold_alignment"):
            val = getattr(self, key)
            if val and not Path(val).exists():
                raise FileNotFoundError(f"{key}: {val} does not exist")
        if self.model_kind not in KINDS:
            raise ValueError(f"model_kind must be one of {KINDS}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.k < 1 or any(k < 1 for k in self.ks) or list(self.ks) != sorted(self.ks):
            raise ValueError("k values must be >= 1 and ks ascending")
        if any(s < 1 for s in self.sizes):
            raise ValueError("sample sizes must be >= 1")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if self.bootstrap_unit not in ("rule", "sentence"):
            raise ValueError("bootstrap_unit must be 'rule' or 'sentence'")
        if self.density_split not in ("train", "test"):
            raise ValueError("density_split must be 'train' or 'test'")
        if not 0 <= self.proxy_dropout < 1 or self.proxy_layers < 1:
            raise ValueError("proxy_dropout must be in [0, 1) and proxy_layers >= 1")
        self.family_kinds()
        return self

    def family_kinds(self, family: str | None = None) -> list[str]:
        fam = family or self.family
        if "+" in fam or "," in fam:
            return resolve_family([f.strip() for f in fam.replace(",", "+").split("+")])
        return resolve_family(fam)

    def proxy_config(self) -> ProxyTrainConfig:
        return ProxyTrainConfig(epochs=self.proxy_epochs, patience=self.proxy_patience,
                                batch_size=self.proxy_batch_size, lr=self.proxy_lr, seed=self.seed)

    def proxy_kwargs(self) -> dict:
        """Proxy architecture: the NMT dimensions plus the proxy-only settings."""
        return {"emb_dim": self.emb_dim, "hidden_dim": self.hidden_dim,
                "dropout": self.proxy_dropout, "layers": self.proxy_layers}


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

class Pipeline:
    def __init__(self, config: RunConfig):
        self.config = config.validate()
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._model: NmtModel | None = None
        self._data = None
        self._relevance: dict[tuple, RelevanceCache] = {}
        self._trained: dict[tuple, MetricReport] = {}

    # ---- data and model ------------------------------------------------

    def data(self):
        """``(train pairs, test pairs, src vocab, tgt vocab)``; vocabularies come from train."""
        if self._data is None:
            c = self.config
            train_raw = read_parallel(c.train_src, c.train_tgt)
            test_raw = read_parallel(c.test_src, c.test_tgt)
            sv = build_vocab([s for s, _ in train_raw], c.min_freq)
            tv = build_vocab([t for _, t in train_raw], c.min_freq)
            train = encode_corpus(train_raw, sv, tv, c.max_len)
            test = encode_corpus(test_raw, sv, tv, c.max_len)
            if not train or not test:
                raise ValueError("no sentence pair survives the max_len filter")
            self._data = (train, test, sv, tv)
        return self._data

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.config.nmt_checkpoint) if self.config.nmt_checkpoint else self.out / "nmt.ckpt"

    def train_nmt(self) -> NmtModel:
        c = self.config
        train, _, sv, tv = self.data()
        cfg = NmtTrainConfig(kind=c.model_kind, emb_dim=c.emb_dim, hidden_dim=c.hidden_dim,
                             epochs=c.nmt_epochs, batch_size=c.nmt_batch_size, lr=c.nmt_lr,
                             seed=c.seed, log_path=str(self.out / "nmt_history.csv"))
        model = train_nmt(train, sv, tv, cfg)
        save_model(model, self.out / "nmt.ckpt")
        self._model = model
        return model

    def model(self) -> NmtModel:
        if self._model is None:
            if self.checkpoint_path.exists():
                self._model = load_model(self.checkpoint_path)
                _, _, sv, tv = self.data()
                if self._model.src_vocab != sv or self._model.tgt_vocab != tv:
                    raise ValueError(f"{self.checkpoint_path} was trained with other vocabularies")
            else:
                self.train_nmt()
        return self._model

    def model_id(self) -> str:
        self.model()
        return _file_digest(self.checkpoint_path)

    # ---- relevance and rules -------------------------------------------

    def relevance(self, split: str, scenario: str) -> RelevanceCache:
        key = (split, scenario)
        if key not in self._relevance:
            train, test, _, _ = self.data()
            methods = [m for m in self.config.methods if self._supported(m)]
            pairs = train if split == "train" else test
            self._relevance[key] = explain_corpus(self.model(), pairs, methods, scenario,
                                                  self.config.max_len)
        return self._relevance[key]

    def _supported(self, method: str) -> bool:
        try:
            check_method(self.model(), method)
        except ValueError:
            return False
        return True

    def rules(self, method: str, k: int, split: str = "test",
              scenario: str = TRAIN_SCENARIO) -> RuleDataset:
        check_method(self.model(), method)
        c = self.config
        corpus = (c.train_src, c.train_tgt) if split == "train" else (c.test_src, c.test_tgt)
        meta = {"model_id": self.model_id(), "corpus_id": _file_digest(*corpus), "split": split}
        return self.relevance(split, scenario).rules(method, k, meta)

    def write_relevance(self, split: str, scenario: str) -> list[Path]:
        cache = self.relevance(split, scenario)
        d = self.out / "relevance"
        d.mkdir(exist_ok=True)
        paths = []
        for method, per_sentence in cache.vectors.items():
            path = d / f"{split}_{scenario}_{method}.jsonl"
            dump_relevance(path, [(sid, rv) for sid, rvs in enumerate(per_sentence) for rv in rvs])
            paths.append(path)
        return paths

    def write_rules(self, method: str, k: int, split: str, scenario: str) -> Path:
        d = self.out / "rules"
        d.mkdir(exist_ok=True)
        path = d / f"{split}_{scenario}_{method}_k{k}.jsonl"
        write_rules(self.rules(method, k, split, scenario), path)
        return path

    # ---- metric --------------------------------------------------------

    def _train_family(self, method: str, k: int, family: str,
                      train_rules: RuleDataset | None = None, tag: str = "") -> MetricReport:
        """Proxies trained on teacher-forcing rules, scored on teacher-forcing test rules."""
        key = (method, k, tuple(self.config.family_kinds(family)), tag)
        if key not in self._trained:
            kinds = [q for q in key[2] if q != BASELINE]
            if not kinds:
                raise ValueError("family has no trainable proxy")
            train_rules = train_rules or self.rules(method, k, "train")
            test_rules = self.rules(method, k, "test")
            self._trained[key] = metric_score(kinds, train_rules, test_rules,
                                              self.config.proxy_config(), seed=self.config.seed,
                                              proxy_kwargs=self.config.proxy_kwargs())
        return self._trained[key]

    def metric(self, method: str, k: int | None = None, family: str | None = None,
               scenario: str | None = None) -> MetricReport:
        """The metric of one method. Proxies always learn from teacher-forcing
        rules; other scenarios only swap the test rules."""
        c = self.config
        k = c.k if k is None else k
        family = family or c.family
        scenario = scenario or c.scenario
        kinds = c.family_kinds(family)
        if kinds == [BASELINE]:
            return self.baseline(method, k, scenario)
        rep = self._train_family(method, k, family)
        nlls = dict(rep.nlls)
        if scenario != TRAIN_SCENARIO:
            nlls = evaluate_family(rep.proxies, self.rules(method, k, "test", scenario))
        proxies = dict(rep.proxies)
        n_test = len(next(iter(nlls.values())))
        if BASELINE in kinds:
            nlls[BASELINE] = baseline_nlls(self.model(), self.rules(method, k, "test", scenario))
        ppl = {q: ppl_from_nlls(nlls[q]) for q in kinds}
        winner = min(kinds, key=lambda q: (ppl[q], kinds.index(q)))
        return MetricReport(method, k, scenario, kinds, ppl, ppl[winner], winner, rep.n_train,
                            n_test, c.seed, proxies=proxies, nlls=nlls)

    def baseline(self, method: str, k: int | None = None, scenario: str | None = None) -> MetricReport:
        k = self.config.k if k is None else k
        test_rules = self.rules(method, k, "test", scenario or self.config.scenario)
        nll = baseline_nlls(self.model(), test_rules)
        ppl = ppl_from_nlls(nll)
        return MetricReport(method, k, test_rules.meta["scenario"], [BASELINE], {BASELINE: ppl},
                            ppl, BASELINE, 0, len(test_rules), self.config.seed,
                            nlls={BASELINE: nll})

    def save_proxies(self, report: MetricReport) -> list[Path]:
        d = self.out / "proxies"
        d.mkdir(exist_ok=True)
        paths = []
        for kind, q in report.proxies.items():
            path = d / f"{report.method}_k{report.k}_{kind}.ckpt"
            save_proxy(q, path)
            paths.append(path)
        return paths

    def write_report(self, report: MetricReport) -> Path:
        d = self.out / "reports"
        d.mkdir(exist_ok=True)
        fam = "+".join(report.family)
        path = d / f"{report.scenario}_{fam}_{report.method}_k{report.k}.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def methods(self) -> list[str]:
        return [m for m in self.config.methods if self._supported(m)]

    # ---- analyses ------------------------------------------------------

    def density(self, split: str | None = None, k: int | None = None) -> dict[str, DensityHistogram]:
        split = split or self.config.density_split
        k = self.config.k if k is None else k
        return {m: density_histogram(self.rules(m, k, split)) for m in self.methods()}

    def stability(self, k: int | None = None, family: str | None = None) -> StabilityTable:
        c = self.config
        reports = [self.metric(m, k, family, TRAIN_SCENARIO) for m in self.methods()]
        groups = [r.sid for r in self.rules(self.methods()[0], c.k if k is None else k).rules]
        return stability_from_reports(reports, fractions=c.fractions, resamples=c.resamples,
                                      seed=c.seed, unit=c.bootstrap_unit, groups=groups)

    def k_sweep(self, ks: Sequence[int] | None = None) -> list[MetricReport]:
        ks = list(ks or self.config.ks)
        if not ks or ks != sorted(ks) or ks[0] < 1:
            raise ValueError("ks must be ascending and >= 1")
        return [self.metric(m, k) for m in self.methods() for k in ks]

    def sample_size_sweep(self, sizes: Sequence[int] | None = None) -> list[MetricReport]:
        """Proxies retrained on rules from seeded subsamples of the training sentences.

        The NMT model and the test rules stay fixed. ``n_train`` on each
        report counts the subsample's rules.
        """
        sizes = list(sizes or self.config.sizes)
        train = self.data()[0]
        if not sizes:
            raise ValueError("no sample sizes given")
        for s in sizes:
            if not 1 <= s <= len(train):
                raise ValueError(f"sample size {s} outside 1..{len(train)}")
        full = self.relevance("train", TRAIN_SCENARIO)
        out = []
        for size in sizes:
            rng = np.random.default_rng(self.config.seed + size)
            idx = sorted(rng.choice(len(train), size=size, replace=False).tolist())
            sub = _subset_cache(full, idx)
            for m in self.methods():
                if size == len(train):
                    rep = self._train_family(m, self.config.k, self.config.family)
                else:
                    rules = sub.rules(m, self.config.k, self.rules(m, self.config.k, "train").meta)
                    rep = self._train_family(m, self.config.k, self.config.family, rules,
                                             tag=f"size={size}")
                out.append(rep)
        return out

    def aer(self, method: str, gold_path: str | None = None) -> AERResult:
        gold_path = gold_path or self.config.gold_alignment
        if not gold_path:
            raise ValueError("no gold alignment file configured")
        scenario = self.config.scenario if self.config.scenario != "real-decode" else TRAIN_SCENARIO
        rules = self.rules(method, 1, "test", scenario)
        hyp = derive_alignment(rules)
        lengths = {sid: len(y) for sid, (_, y) in rules.sequences.items()}
        return compute_aer(hyp, read_alignments(gold_path), lengths)


def _subset_cache(cache: RelevanceCache, idx: Sequence[int]) -> RelevanceCache:
    return RelevanceCache(cache.scenario, [cache.pairs[i] for i in idx],
                          [cache.sequences[i] for i in idx],
                          {m: [v[i] for i in idx] for m, v in cache.vectors.items()},
                          cache.vocab_sizes)


def k_sweep(config: RunConfig, ks: Sequence[int]) -> list[MetricReport]:
    return Pipeline(config).k_sweep(ks)


def sample_size_sweep(config: RunConfig, sizes: Sequence[int]) -> list[MetricReport]:
    return Pipeline(config).sample_size_sweep(sizes)


# --------------------------------------------------------------------------
# the toy task
# --------------------------------------------------------------------------

# copy-with-noise: 50-word vocabulary (46 tokens plus 4 reserved), 5000 pairs,
# sentences below 10 tokens; six tokens only ever occur as source-side
# distractors, so explanations have something to get wrong
TOY_TASK = {"n": 5000, "test_size": 500, "vocab_size": 50, "max_len": 10, "noise": 0.05,
            "distractors": 6, "insert": 0.2}
# the 2-layer SA proxy with dropout is what keeps wider rules (k=4) from being
# memorized instead of learned on a corpus this small
TOY_SETTINGS = {"model_kind": "transformer", "emb_dim": 64, "hidden_dim": 128,
                "nmt_epochs": 10, "nmt_lr": 3e-3, "max_len": 16,
                "proxy_layers": 2, "proxy_dropout": 0.3}


def toy_config(directory, seed: int = 0, **overrides) -> RunConfig:
    """Write the toy corpus under ``directory`` and return a RunConfig for it."""
    d = Path(directory)
    paths = write_toy_corpus(d / "data", seed=seed, **TOY_TASK)
    values = {**TOY_SETTINGS, **{k: str(v) for k, v in paths.items()},
              "out_dir": str(d / "run"), "seed": seed}
    values.update(overrides)
    return RunConfig(**values)
