"""Independent reference computations for the explanation methods."""
from fractions import Fraction

import numpy as np

from nmtfidelity.nmt import nmt_forward


def occlusion_oracle(model, ctx, y):
    """One separate forward pass per removed occurrence."""
    base = nmt_forward(model, ctx).dist[y]
    src = []
    for i in range(len(ctx.x)):
        keep = np.ones(len(ctx.x), dtype=bool)
        keep[i] = False
        src.append(base - nmt_forward(model, ctx, src_keep=keep).dist[y])
    tgt = []
    for j in range(ctx.t - 1):
        keep = np.ones(ctx.t - 1, dtype=bool)
        keep[j] = False
        tgt.append(base - nmt_forward(model, ctx, tgt_keep=keep).dist[y])
    return np.array(src, dtype=np.float64), np.array(tgt, dtype=np.float64)


def exact_l1(row):
    return float(sum(abs(Fraction(float(v))) for v in row))


def exact_dot(a, b):
    return float(sum(Fraction(float(u)) * Fraction(float(v)) for u, v in zip(a, b)))
