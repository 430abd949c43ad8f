"""How the metric moves as each method is allowed more words.

    python3 demos/k_sweep.py [work_dir]

Reuses the model in ``work_dir`` if demos/toy_metric.py already trained one.
At k=1 a proxy sees a single word per decision; by k=4 it also sees the
neighbourhood the method considered relevant. Methods whose first choice is
often wrong gain the most. Attention starts near the floor, so for it the
question is whether the extra words cost anything.
"""
import sys

from nmtfidelity.analysis import emit_report
from nmtfidelity.pipeline import Pipeline, toy_config

work = sys.argv[1] if len(sys.argv) > 1 else "toy_run"
pipe = Pipeline(toy_config(work, seed=0))

ks = [1, 2, 4]
reports = pipe.k_sweep(ks)
table = {(r.method, r.k): r.metric_ppl for r in reports}

print("method " + "".join(f"   k={k}" for k in ks))
for m in pipe.methods():
    print(f"{m:6s} " + "".join(f"{table[m, k]:7.3f}" for k in ks))

# one two-column .dat file per method, ready for gnuplot or matplotlib
for path in emit_report(reports, "plot-data", pipe.out / "plot", "sweep_k"):
    print(path)
