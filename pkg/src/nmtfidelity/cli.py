"""Command-line front end: ``python -m nmtfidelity <command> --config run.cfg``.

Every command reads one RunConfig file; ``--seed``, ``--out-dir`` and
``--set key=value`` override it. Outputs land under the run's out_dir.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import (density_table, emit_report, metric_matrix, rank_comparison,
                       stability_csv, write_series)
from .proxy import MetricReport, train_proxy
from .pipeline import TRAIN_SCENARIO, Pipeline, RunConfig

log = logging.getLogger("nmtfidelity")


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, _, val = item.partition("=")
        overrides[key.strip()] = RunConfig.parse_value(key.strip(), val)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig(**overrides)


def _methods(p: Pipeline, args) -> list[str]:
    return args.methods.split(",") if getattr(args, "methods", None) else p.methods()


def cmd_train_nmt(p: Pipeline, args):
    from .nmt import token_accuracy
    model = p.train_nmt()
    acc = token_accuracy(model, p.data()[1])
    print(f"saved {p.out / 'nmt.ckpt'}  test token accuracy {acc:.4f}")


def cmd_explain(p: Pipeline, args):
    for path in p.write_relevance(args.split, args.scenario or p.config.scenario):
        print(path)


def cmd_extract_rules(p: Pipeline, args):
    scen = args.scenario or p.config.scenario
    k = args.k or p.config.k
    for m in _methods(p, args):
        for split in (["train", "test"] if args.split == "both" else [args.split]):
            print(p.write_rules(m, k, split, TRAIN_SCENARIO if split == "train" else scen))


def cmd_train_proxy(p: Pipeline, args):
    k = args.k or p.config.k
    for m in _methods(p, args):
        rep = p.metric(m, k, args.family, TRAIN_SCENARIO)
        for path in p.save_proxies(rep):
            print(path)
        for kind, q in rep.proxies.items():
            print(f"{m} k={k} {kind}: best valid ppl {min(h[2] for h in q.history):.4f}")


def _metric_cmd(p: Pipeline, args, family):
    k = args.k or p.config.k
    reports = []
    for m in _methods(p, args):
        rep = p.metric(m, k, family, args.scenario)
        p.write_report(rep)
        reports.append(rep)
        print(f"{m}\tk={k}\t{rep.scenario}\t{'+'.join(rep.family)}\tppl {rep.metric_ppl:.4f} ({rep.winner})")
    emit_report(reports, "csv", p.out, stem=f"{args.command}_k{k}")


def cmd_metric(p, args):
    _metric_cmd(p, args, args.family)


def cmd_baseline(p, args):
    _metric_cmd(p, args, "baseline-masked")


def cmd_density(p: Pipeline, args):
    hists = p.density(args.split, args.k)
    path = density_table(hists, p.out / "density.csv")
    print(path.read_text(), end="")


def cmd_stability(p: Pipeline, args):
    table = p.stability(args.k, args.family)
    path = stability_csv(table, p.out / "stability.csv")
    print(path.read_text(), end="")


def cmd_sweep_k(p: Pipeline, args):
    ks = [int(v) for v in args.ks.split(",")] if args.ks else None
    reports = p.k_sweep(ks)
    for r in reports:
        p.write_report(r)
    for path in emit_report(reports, "csv", p.out, "sweep_k") + \
            emit_report(reports, "plot-data", p.out / "plot", "sweep_k"):
        print(path)


def cmd_sweep_size(p: Pipeline, args):
    sizes = [int(v) for v in args.sizes.split(",")] if args.sizes else None
    reports = p.sample_size_sweep(sizes)
    series: dict[str, list] = {}
    for s, r in zip([s for s in (sizes or p.config.sizes) for _ in p.methods()], reports):
        series.setdefault(r.method, []).append((s, r.metric_ppl))
    plot = p.out / "plot"
    plot.mkdir(exist_ok=True)
    for m, pts in sorted(series.items()):
        print(write_series(plot / f"sweep_size_{m}.dat", pts))


def cmd_aer(p: Pipeline, args):
    methods = _methods(p, args)
    aer, ppl = {}, {}
    for m in methods:
        res = p.aer(m, args.gold)
        aer[m] = res.aer
        ppl[m] = p.metric(m, 1, args.family, TRAIN_SCENARIO).metric_ppl
        print(f"{m}\tAER {res.aer:.4f}\tskipped target words {res.skipped_fraction:.2%}")
    print(rank_comparison(ppl, aer, p.out / "aer_rank.csv"))


def cmd_report(p: Pipeline, args):
    files = sorted((p.out / "reports").glob("*.json"))
    if not files:
        raise SystemExit(f"no reports under {p.out / 'reports'}; run metric first")
    reports = [MetricReport.from_dict(json.loads(f.read_text())) for f in files]
    for path in emit_report(reports, args.format, p.out / "report"):
        print(path)
    cells, rows = {}, []
    methods = sorted({r.method for r in reports})
    for r in reports:
        name = "+".join(r.family) if len(r.family) > 1 else r.family[0]
        row = f"{name}/{r.scenario}/k={r.k}"
        if row not in rows:
            rows.append(row)
        cells[(row, r.method)] = r.metric_ppl
    print(metric_matrix(cells, sorted(rows), methods, p.out / "report" / "matrix.csv"))


COMMANDS = {
    "train-nmt": cmd_train_nmt, "explain": cmd_explain, "extract-rules": cmd_extract_rules,
    "train-proxy": cmd_train_proxy, "metric": cmd_metric, "baseline": cmd_baseline,
    "density": cmd_density, "stability": cmd_stability, "sweep-k": cmd_sweep_k,
    "sweep-size": cmd_sweep_size, "aer": cmd_aer, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    keys = ", ".join(RunConfig.keys())
    parser = argparse.ArgumentParser(
        prog="nmtfidelity", description="Fidelity evaluation of NMT explanation methods.",
        epilog=f"config keys: {keys}")
    parser.add_argument("--config", help="flat 'key = value' run configuration file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", help="override the config out_dir")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help, *opts):
        sp = sub.add_parser(name, help=help)
        for o in opts:
            o(sp)
        return sp

    methods = lambda sp: sp.add_argument("--methods", help="comma-separated subset of the config methods")
    k = lambda sp: sp.add_argument("--k", type=int, help="top-k (default: config k)")
    scen = lambda sp: sp.add_argument("--scenario", choices=["teacher-forcing", "real-decode", "golden"])
    fam = lambda sp: sp.add_argument("--family", help="FN, RN, SA, Comb or kinds joined by '+'")

    add("train-nmt", "train the NMT model and save its checkpoint")
    sp = add("explain", "dump relevance vectors", scen)
    sp.add_argument("--split", choices=["train", "test"], default="test")
    sp = add("extract-rules", "write rule datasets", methods, k, scen)
    sp.add_argument("--split", choices=["train", "test", "both"], default="both")
    add("train-proxy", "train and save proxies", methods, k, fam)
    add("metric", "compute the fidelity metric", methods, k, scen, fam)
    add("baseline", "score the masked-model baseline", methods, k, scen)
    sp = add("density", "rule density histogram", k)
    sp.add_argument("--split", choices=["train", "test"])
    add("stability", "bootstrap ranking stability", k, fam)
    sp = add("sweep-k", "metric across k values")
    sp.add_argument("--ks", help="comma-separated, ascending")
    sp = add("sweep-size", "metric across training sample sizes")
    sp.add_argument("--sizes", help="comma-separated sentence counts")
    sp = add("aer", "alignment error rate of top-1 source words", methods, fam)
    sp.add_argument("--gold", help="gold alignment file (default: config gold_alignment)")
    sp = add("report", "collect saved reports into tables")
    sp.add_argument("--format", choices=["csv", "json", "plot-data"], default="csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        p = Pipeline(cfg)
        (p.out / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
        COMMANDS[args.command](p, args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
