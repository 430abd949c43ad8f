"""Fidelity evaluation of NMT explanation methods.

Explanation methods pick the words that matter for each translation
decision; proxies trained only on those words are scored on how well they
imitate the NMT model, and the best proxy perplexity is the metric.
"""
from .data import Vocab, SentencePair, Context, build_vocab, copy_task
from .nmt import RNNSearch, Transformer, make_model, train_nmt, greedy_decode, NmtTrainConfig
from .explain import METHODS, relevance, explain_sentence
from .rules import SCENARIOS, RuleDataset, RuleInstance, build_rule_dataset, density_histogram
from .proxy import MetricReport, ProxyTrainConfig, metric_score, baseline_score, train_proxy
from .analysis import AlignmentSet, compute_aer, derive_alignment, bootstrap_stability, emit_report
from .pipeline import Pipeline, RunConfig, k_sweep, sample_size_sweep

__version__ = "0.1.0"
