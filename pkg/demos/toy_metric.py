"""The fidelity metric on the copy-with-noise toy task.

Run from the repository root:

    python3 demos/toy_metric.py [work_dir]

A one-layer Transformer learns to copy token strings while skipping the six
"distractor" tokens that only ever appear on the source side. Each explanation
method then picks one word per decision (k=1), an SA proxy learns to predict
the model's output from that word alone, and its perplexity on held-out
decisions is the metric. Lower is better.
"""
import sys
import time

from nmtfidelity.nmt import token_accuracy
from nmtfidelity.pipeline import Pipeline, toy_config

work = sys.argv[1] if len(sys.argv) > 1 else "toy_run"
start = time.time()

cfg = toy_config(work, seed=0)
pipe = Pipeline(cfg)
train, test, _, _ = pipe.data()
print(f"{len(train)} training and {len(test)} test sentence pairs")

# The NMT model is trained once and cached as <work>/run/nmt.ckpt.
model = pipe.model()
print(f"teacher-forcing token accuracy on test: {token_accuracy(model, test):.3f}")

# With only the selected word the proxy has to do the model's job. A method that
# points at the word being copied makes that easy; one that points at a
# distractor does not.
print("\nmethod   SA ppl   baseline ppl")
for method in pipe.methods():
    rep = pipe.metric(method, 1)
    base = pipe.baseline(method, 1)
    pipe.write_report(rep)
    print(f"{method:7s} {rep.metric_ppl:7.3f} {base.metric_ppl:13.3f}")

# The baseline skips proxy training: it runs the NMT model itself with every
# unselected word zeroed out. A model never trained on such inputs does badly,
# which is why trained proxies are needed to tell the methods apart.
print(f"\nreports in {pipe.out / 'reports'}  ({time.time() - start:.0f} s)")
