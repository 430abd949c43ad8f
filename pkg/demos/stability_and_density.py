"""Rule density and ranking stability on the toy task.

    python3 demos/stability_and_density.py [work_dir]

Density: how often each distinct rule (word multisets plus label) recurs in
the training rules. A method whose choices repeat gives the proxy fewer, better
supported rules to learn.

Stability: resample the test rules many times at several sizes and check
whether the methods keep their full-test-set ranking. The trained proxies stay
frozen, so this measures how much test data the ranking needs.
"""
import sys

from nmtfidelity.pipeline import Pipeline, toy_config

work = sys.argv[1] if len(sys.argv) > 1 else "toy_run"
pipe = Pipeline(toy_config(work, seed=0, resamples=200))

print("rule frequency bins: 1, 2-10, 11-100, 101-1000, >1000")
for m, hist in pipe.density().items():
    print(f"{m:6s} {hist.total:6d} distinct  " + " ".join(f"{b:5d}" for b in hist.bins))

table = pipe.stability()
print("\nfraction  " + "  ".join(table.columns))
for frac, row in zip(table.fractions, table.rates):
    print(f"{frac:8.0%}  " + "  ".join(f"{v:5.1f}%" for v in row))
