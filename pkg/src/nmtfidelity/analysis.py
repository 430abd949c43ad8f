"""Alignment error rate, ranking stability and report tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .proxy import MetricReport, ppl_from_nlls
from .rules import DensityHistogram, RuleDataset

Link = tuple[int, int]   # (source position, target position), 1-based

DEFAULT_FRACTIONS = (0.01, 0.05, 0.2, 0.5, 1.0)


# --------------------------------------------------------------------------
# alignments
# --------------------------------------------------------------------------

@dataclass
class AlignmentSet:
    """Per-sentence sure links ``S`` and possible links ``P`` (``S`` is added to ``P``)."""

    sure: dict[int, set[Link]] = field(default_factory=dict)
    possible: dict[int, set[Link]] = field(default_factory=dict)

    def __post_init__(self):
        for sid, links in self.sure.items():
            self.possible.setdefault(sid, set()).update(links)
        for sid in self.possible:
            self.sure.setdefault(sid, set())
        for sid, links in self.possible.items():
            if any(i < 1 or j < 1 for i, j in links):
                raise ValueError(f"sentence {sid}: alignment positions are 1-based")

    @property
    def sids(self) -> set[int]:
        return set(self.possible)


def read_alignments(path) -> AlignmentSet:
    """Lines ``sid i-j`` (sure) or ``sid i?j`` (possible); several links per line allowed."""
    sure: dict[int, set[Link]] = {}
    possible: dict[int, set[Link]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            sid = int(parts[0])
            sure.setdefault(sid, set())
            possible.setdefault(sid, set())
            for tok in parts[1:]:
                sep = "-" if "-" in tok else "?"
                try:
                    i, j = (int(v) for v in tok.split(sep))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad link {tok!r}") from None
                (sure if sep == "-" else possible)[sid].add((i, j))
    return AlignmentSet(sure, possible)


def write_alignments(aset: AlignmentSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(aset.sids):
            links = [f"{i}-{j}" for i, j in sorted(aset.sure[sid])]
            links += [f"{i}?{j}" for i, j in sorted(aset.possible[sid] - aset.sure[sid])]
            fh.write(" ".join([str(sid)] + links) + "\n")


def derive_alignment(rules: RuleDataset) -> AlignmentSet:
    """Link each decision point's top-1 source word to its target position."""
    if rules.meta.get("k", 1) != 1 or any(len(r.source) > 1 for r in rules.rules):
        raise ValueError("alignment derivation needs rules extracted with k=1")
    if rules.meta.get("scenario") == "real-decode":
        raise ValueError("alignments compare against gold targets; use teacher-forcing or golden rules")
    links: dict[int, set[Link]] = {}
    for r in rules.rules:
        s = links.setdefault(r.sid, set())
        if r.source:
            s.add((r.source[0][1], r.t))
    return AlignmentSet(links, {k: set(v) for k, v in links.items()})


@dataclass
class AERResult:
    aer: float
    skipped_fraction: float
    skipped: int
    total_target: int


def compute_aer(hyp: AlignmentSet, gold: AlignmentSet,
                target_lengths: Mapping[int, int] | None = None) -> AERResult:
    """Corpus AER ``1 - (|A&S| + |A&P|) / (|A| + |S|)``.

    Hypothesis links on target words that have no gold link at all are
    dropped first; their share of all target words is reported. Target
    lengths default to the target positions the hypothesis covers.
    """
    if hyp.sids != gold.sids:
        raise ValueError(f"sentence ids differ: {sorted(hyp.sids ^ gold.sids)[:5]}")
    a_s = a_p = n_a = n_s = 0
    skipped = total = 0
    for sid in sorted(gold.sids):
        S, P = gold.sure[sid], gold.possible[sid]
        aligned = {j for _, j in P}
        if target_lengths is not None:
            positions = set(range(1, target_lengths[sid] + 1))
        else:
            positions = {j for _, j in hyp.possible[sid]}
        total += len(positions)
        skipped += len(positions - aligned)
        A = {(i, j) for i, j in hyp.possible[sid] if j in aligned}
        a_s += len(A & S)
        a_p += len(A & P)
        n_a += len(A)
        n_s += len(S)
    if n_a + n_s == 0:
        raise ValueError("nothing to score: no hypothesis or sure links")
    # one division, so simple cases like 1/3 come out correctly rounded
    aer = (n_a + n_s - a_s - a_p) / (n_a + n_s)
    return AERResult(aer, skipped / total if total else 0.0, skipped, total)


# --------------------------------------------------------------------------
# ranking stability
# --------------------------------------------------------------------------

@dataclass
class StabilityTable:
    fractions: list[float]
    columns: list[str]
    rates: np.ndarray          # (fractions, columns), percentages
    resamples: int
    seed: int

    def rows(self):
        for f, row in zip(self.fractions, self.rates):
            yield f, dict(zip(self.columns, row.tolist()))


def ranking(ppl: Mapping[str, float]) -> tuple[str, ...]:
    """Methods ordered best (lowest PPL) first; ties by name."""
    return tuple(sorted(ppl, key=lambda m: (ppl[m], m)))


def _instantiation_ppl(nll, idx=None) -> float:
    nll = np.asarray(nll, dtype=np.float64)
    if nll.ndim == 1:
        return ppl_from_nlls(nll if idx is None else nll[idx])
    # several family members: the metric is the best member
    sub = nll if idx is None else nll[:, idx]
    return min(ppl_from_nlls(row) for row in sub)


def bootstrap_stability(nlls: Mapping[str, Mapping[str, np.ndarray]],
                        fractions: Sequence[float] = DEFAULT_FRACTIONS, resamples: int = 1000,
                        seed: int = 0, replace: bool = True, unit: str = "rule",
                        groups: Sequence[int] | None = None) -> StabilityTable:
    """How often a resampled test set ranks the methods as the full set does.

    ``nlls[instantiation][method]`` holds the frozen proxies' per-rule NLLs
    on the full test set (a 2-D array for a multi-member family). Rules are
    aligned across methods, so every method is scored on the same resampled
    decision points. Proxies are never retrained.

    ``unit="sentence"`` resamples whole sentences instead of rules;
    ``groups`` then gives each rule's sentence id.
    """
    cols = list(nlls)
    if not cols:
        raise ValueError("no metric instantiations given")
    if unit not in ("rule", "sentence"):
        raise ValueError(f"unknown resampling unit {unit!r}")
    n = None
    for col in cols:
        if len(nlls[col]) < 2:
            raise ValueError(f"{col}: ranking needs at least two methods")
        for arr in nlls[col].values():
            m = np.asarray(arr).shape[-1]
            if n is not None and m != n:
                raise ValueError("per-rule NLL arrays have different lengths")
            n = m
    if unit == "sentence":
        if groups is None or len(groups) != n:
            raise ValueError("sentence resampling needs one sentence id per rule")
        sids = sorted(set(groups))
        members = [np.flatnonzero(np.asarray(groups) == s) for s in sids]
        n_units = len(sids)
    else:
        n_units = n
    rng = np.random.default_rng(seed)
    rates = np.zeros((len(fractions), len(cols)))
    refs = {c: ranking({m: _instantiation_ppl(v) for m, v in nlls[c].items()}) for c in cols}
    for fi, frac in enumerate(fractions):
        size = int(round(frac * n_units))
        if size < 1:
            raise ValueError(f"fraction {frac} of {n_units} {unit}s leaves an empty sample")
        hits = np.zeros(len(cols))
        for _ in range(resamples):
            if replace or size < n_units:
                idx = rng.choice(n_units, size=size, replace=replace)
            else:
                idx = np.arange(n_units)
            if unit == "sentence":
                idx = np.concatenate([members[i] for i in idx])
            for ci, c in enumerate(cols):
                rk = ranking({m: _instantiation_ppl(v, idx) for m, v in nlls[c].items()})
                hits[ci] += rk == refs[c]
        rates[fi] = 100.0 * hits / resamples
    return StabilityTable(list(fractions), cols, rates, resamples, seed)


def stability_from_reports(reports: Sequence[MetricReport], **kwargs) -> StabilityTable:
    """Bootstrap over the per-rule NLLs kept on freshly computed MetricReports.

    Columns are the single proxies of each family plus the family itself
    when it has more than one member.
    """
    nlls: dict[str, dict[str, np.ndarray]] = {}
    for r in reports:
        if not r.nlls:
            raise ValueError(f"report for {r.method} carries no per-rule NLLs (loaded from disk?)")
        for kind, arr in r.nlls.items():
            nlls.setdefault(kind, {})[r.method] = np.asarray(arr)
        if len(r.nlls) > 1:
            col = "+".join(r.family)
            nlls.setdefault(col, {})[r.method] = np.stack([r.nlls[k] for k in r.family])
    return bootstrap_stability(nlls, **kwargs)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(round(float(v), 6))
    return str(v)


def _write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return Path(path)


REPORT_COLUMNS = ("method", "k", "scenario", "family", "winner", "metric_ppl", "n_train",
                  "n_test", "seed")


def emit_report(reports: Sequence[MetricReport], fmt: str, out_dir, stem: str = "metric") -> list[Path]:
    """Write MetricReports as ``csv`` (one row per report), ``json`` or ``plot-data``.

    plot-data writes one ``x y`` file per (method, family) series with
    ``x = k``.
    """
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(reports, key=lambda r: (r.method, "+".join(r.family), r.scenario, r.k))
    if fmt == "csv":
        proxies = sorted({p for r in ordered for p in r.per_proxy_ppl})
        header = list(REPORT_COLUMNS) + [f"ppl_{p}" for p in proxies]
        rows = []
        for r in ordered:
            d = r.to_dict()
            d["family"] = "+".join(r.family)
            rows.append([d[c] for c in REPORT_COLUMNS] + [r.per_proxy_ppl.get(p, "") for p in proxies])
        return [_write_csv(out / f"{stem}.csv", header, rows)]
    if fmt == "json":
        path = out / f"{stem}.json"
        path.write_text(json.dumps([r.to_dict() for r in ordered], indent=2) + "\n", encoding="utf-8")
        return [path]
    if fmt == "plot-data":
        series: dict[tuple[str, str, str], list[tuple[int, float]]] = {}
        for r in ordered:
            series.setdefault((r.method, "+".join(r.family), r.scenario), []).append((r.k, r.metric_ppl))
        paths = []
        for (method, fam, scen), pts in sorted(series.items()):
            path = out / f"{stem}_{method}_{fam}_{scen}.dat"
            path.write_text("".join(f"{x} {_fmt(y)}\n" for x, y in sorted(pts)), encoding="utf-8")
            paths.append(path)
        return paths
    raise ValueError(f"unknown report format {fmt!r}; expected csv, json or plot-data")


def write_series(path, points: Sequence[tuple[float, float]]) -> Path:
    Path(path).write_text("".join(f"{_fmt(x)} {_fmt(y)}\n" for x, y in points), encoding="utf-8")
    return Path(path)


def metric_matrix(cells: Mapping[tuple[str, str], float], rows: Sequence[str],
                  methods: Sequence[str], path) -> Path:
    """Instantiation-by-method PPL table; missing cells are written as ``-``."""
    out = [[r] + [cells.get((r, m), "-") for m in methods] for r in rows]
    return _write_csv(path, ["metric"] + list(methods), out)


def density_table(hists: Mapping[str, DensityHistogram], path) -> Path:
    rows = [[m] + h.as_row() for m, h in hists.items()]
    return _write_csv(path, ["method", "total", "B1", "B2", "B3", "B4", "B5"], rows)


def stability_csv(table: StabilityTable, path) -> Path:
    rows = [[f"{int(round(f * 100))}%"] + list(table.rates[i]) for i, f in enumerate(table.fractions)]
    return _write_csv(path, ["fraction"] + table.columns, rows)


def ranks(values: Mapping[str, float]) -> dict[str, int]:
    return {m: i + 1 for i, m in enumerate(ranking(values))}


def rank_comparison(ppl: Mapping[str, float], other: Mapping[str, float], path,
                    other_name: str = "AER") -> Path:
    """PPL rank next to another measure's rank; ``*`` marks rows where they differ."""
    rp, ro = ranks(ppl), ranks(other)
    rows = []
    for m in sorted(ppl, key=lambda m: (rp[m], m)):
        mark = "*" if rp[m] != ro[m] else ""
        rows.append([m, ppl[m], rp[m], other[m], ro[m], mark])
    return _write_csv(path, ["method", "ppl", "ppl_rank", other_name.lower(),
                             f"{other_name.lower()}_rank", "mismatch"], rows)
