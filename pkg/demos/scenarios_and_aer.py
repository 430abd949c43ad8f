"""Scenario transfer and alignment error on the toy task.

    python3 demos/scenarios_and_aer.py [work_dir]

Proxies always learn from teacher-forcing rules. Here the same proxies are
scored on rules from the model's own greedy output (real-decode) and on rules
whose label is the reference word (golden). Because 5% of reference words were
replaced at random, golden rules ask the proxy for words the model would not
produce, and perplexity goes up.

The toy task also has a known word alignment: target word j comes from the
j-th source word that is not a distractor. That gives a gold standard for AER.
"""
import sys
from pathlib import Path

from nmtfidelity.analysis import AlignmentSet, write_alignments
from nmtfidelity.data import read_parallel, toy_tokens
from nmtfidelity.pipeline import TOY_TASK, Pipeline, toy_config

work = Path(sys.argv[1] if len(sys.argv) > 1 else "toy_run")
cfg = toy_config(work, seed=0)

distractors = set(toy_tokens(TOY_TASK["vocab_size"])[-TOY_TASK["distractors"]:])
sure, possible = {}, {}
for sid, (x, y) in enumerate(read_parallel(cfg.test_src, cfg.test_tgt)):
    content = [i + 1 for i, w in enumerate(x) if w not in distractors]
    # a reference word that was swapped by the noise keeps its link, but only as "possible"
    sure[sid] = {(i, j + 1) for j, i in enumerate(content) if x[i - 1] == y[j]}
    possible[sid] = {(i, j + 1) for j, i in enumerate(content)}
    sure[sid].add((len(x) + 1, len(y) + 1))         # EOS to EOS
gold_path = work / "gold.align"
write_alignments(AlignmentSet(sure, possible), gold_path)

cfg.gold_alignment = str(gold_path)
pipe = Pipeline(cfg)

print("method  teacher-forcing  real-decode  golden")
for m in pipe.methods():
    ppl = [pipe.metric(m, 1, "SA", s).metric_ppl for s in ("teacher-forcing", "real-decode", "golden")]
    print(f"{m:6s} {ppl[0]:16.3f} {ppl[1]:12.3f} {ppl[2]:7.3f}")

# AER reads the top-1 source word of each decision as an alignment link.
print("\nmethod  AER    skipped")
for m in pipe.methods():
    res = pipe.aer(m)
    print(f"{m:6s} {res.aer:.3f}  {res.skipped_fraction:.1%}")
