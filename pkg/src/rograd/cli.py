"""Command-line entry point: ``rograd <command> [--config run.json] [flags]``.

Keys of the JSON config file set flag defaults (``labeled_ratio`` for
``--labeled-ratio``); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, apply_compound, intensity, provenance_csv_row
from .backbones import ARCHITECTURES, BackboneConfig, train_classifier
from .embed_store import build_store
from .enrichment import EnrichmentConfig, enrich, enrichment_stats
from .harness import (
    GridSpec,
    make_encoder,
    make_gateway,
    read_results,
    run_grid,
    summarize,
    vocab_from_graph,
    write_curve,
)
from .r2cl import R2clConfig, train as train_r2cl
from .sggm import SggmConfig, generate_batch, read_samples, write_samples
from .synthetic import make_synthetic_tag
from .tag_graph import load_graph, save_graph

logger = logging.getLogger("rograd")


def _manifest(path: str) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def cmd_synthetic(args) -> int:
    tag = make_synthetic_tag(n_nodes=args.nodes, n_classes=args.classes, seed=args.seed,
                             homophily=args.homophily, purity=args.purity)
    out = save_graph(tag.graph, args.out)
    (Path(args.out) / "vocab.json").write_text(json.dumps(tag.vocab, indent=1), encoding="utf-8")
    print(out)
    return 0


def cmd_attack(args) -> int:
    graph = load_graph(_manifest(args.graph))
    spec = AttackSpec(args.nra, args.sha, args.fda, args.labeled_ratio, args.seed)
    attacked = apply_compound(graph, spec)
    out = save_graph(attacked.graph, args.out)
    (Path(args.out) / "provenance.csv").write_text(provenance_csv_row(spec, attacked.provenance, header=True),
                                                  encoding="utf-8")
    print(json.dumps({"intensity": round(intensity(spec), 2), **dataclasses.asdict(attacked.provenance)}))
    _carry_vocab(args.graph, args.out)
    logger.info("attacked graph written to %s", out)
    return 0


def _vocab(graph, graph_arg: str) -> dict:
    path = Path(graph_arg) if Path(graph_arg).is_dir() else Path(graph_arg).parent
    vocab_file = path / "vocab.json"
    if vocab_file.exists():
        return json.loads(vocab_file.read_text(encoding="utf-8"))
    return vocab_from_graph(graph)


def _carry_vocab(graph_arg: str, out_dir: str) -> None:
    """Keep the mock vocabulary next to derived datasets."""
    src = (Path(graph_arg) if Path(graph_arg).is_dir() else Path(graph_arg).parent) / "vocab.json"
    if src.exists():
        (Path(out_dir) / "vocab.json").write_text(src.read_text(encoding="utf-8"), encoding="utf-8")


def _grid_for(args) -> GridSpec:
    return GridSpec(encoder=args.encoder, llm=args.llm)


def cmd_generate(args) -> int:
    graph = load_graph(_manifest(args.graph))
    encoder = make_encoder(args.encoder)
    gateway = make_gateway(_grid_for(args), _vocab(graph, args.graph), args.seed)
    store = build_store(graph, encoder, graph.train_mask)
    config = SggmConfig(k=args.k, max_rounds=args.rounds, keyword_weight=args.keyword_weight)
    present = sorted(set(graph.labels[graph.train_mask].tolist()))
    samples = generate_batch({c: args.per_class for c in present}, store, dict(zip(graph.node_ids, graph.texts)),
                             gateway, encoder, config, seed=args.seed, class_names=graph.class_names)
    write_samples(args.out, samples, graph.class_names)
    clean = sum(s.clean for s in samples)
    print(json.dumps({"samples": len(samples), "clean": clean, "llm_calls": gateway.calls}))
    return 0


def cmd_enrich(args) -> int:
    graph = load_graph(_manifest(args.graph))
    samples = read_samples(args.samples)
    encoder = make_encoder(args.encoder) if args.encoder else None
    enriched = enrich(graph, samples, EnrichmentConfig(tau=args.tau, encoder=encoder))
    enrichment_stats(enriched)
    save_graph(enriched.graph, args.out)
    _carry_vocab(args.graph, args.out)
    print(json.dumps({"nodes_added": enriched.stats.nodes_added, "edges_added": enriched.stats.edges_added}))
    return 0


def cmd_train_r2cl(args) -> int:
    graph = load_graph(_manifest(args.graph))
    encoder = make_encoder(args.encoder)
    gateway = make_gateway(_grid_for(args), _vocab(graph, args.graph), args.seed)
    config = R2clConfig(epochs=args.epochs, period=args.period, n_anchors=args.anchors, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_r2cl(graph, config, gateway, encoder, out / "r2cl_log.csv", out / "r2cl.pt")
    save_graph(result.downstream_graph(), out)
    _carry_vocab(args.graph, args.out)
    np.save(out / "projections.npy", result.representations.z)
    print(json.dumps({"epochs": config.epochs, "refinements": result.refinement_events}))
    return 0


def cmd_classify(args) -> int:
    graph = load_graph(_manifest(args.graph))
    config = BackboneConfig(args.backbone, max_epochs=args.epochs, patience=args.patience, seed=args.seed)
    _, report = train_classifier(graph, config=config)
    print(json.dumps({"backbone": args.backbone, "best_val_acc": report.best_val_acc, "test_acc": report.test_acc,
                      "epochs_run": report.epochs_run, "best_epoch": report.best_epoch}))
    return 0


def cmd_grid(args) -> int:
    grid = GridSpec.from_json(args.grid) if args.grid else GridSpec()
    if args.workers:
        grid = dataclasses.replace(grid, workers=args.workers)
    outcome = run_grid(grid, args.out, resume=args.resume)
    for name, rep in outcome.reports.items():
        print(f"{name}: clean={rep.clean_acc:.2f} worst={rep.worst_acc:.2f} avg={rep.avg_acc:.2f} "
              f"norm_auc={rep.norm_auc:.3f}")
    if outcome.failures:
        print(f"{len(outcome.failures)} cells failed", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    rows = read_results(args.results)
    curves, reports = summarize(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for method, curve in curves.items():
            write_curve(out / f"curve_{method}.csv", curve)
    print(json.dumps({k: dataclasses.asdict(v) for k, v in reports.items()}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rograd", description="Robustness toolkit for text-attributed graphs.")
    parser.add_argument("--config", help="JSON file whose keys set flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def llm_flags(p):
        p.add_argument("--encoder", default="hashing:256", help="hashing[:dim] | st:<model> | http:<url>|<model>|<dim>")
        p.add_argument("--llm", default="mock", choices=("mock", "http"))

    p = sub.add_parser("synthetic", help="write a synthetic TAG dataset")
    p.add_argument("--out")
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--homophily", type=float, default=0.8)
    p.add_argument("--purity", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthetic)

    p = sub.add_parser("attack", help="apply a compound attack and save the attacked graph")
    p.add_argument("--graph", help="manifest file or dataset directory")
    p.add_argument("--out")
    p.add_argument("--nra", type=float, default=0.0)
    p.add_argument("--sha", type=float, default=0.0)
    p.add_argument("--fda", type=float, default=0.0)
    p.add_argument("--labeled-ratio", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("generate", help="generate synthetic samples per class (JSONL)")
    p.add_argument("--graph")
    p.add_argument("--out")
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--keyword-weight", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    llm_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("enrich", help="insert generated samples into a graph")
    p.add_argument("--graph")
    p.add_argument("--samples")
    p.add_argument("--out")
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--encoder", default=None, help="needed only when feature and sample spaces differ")
    p.set_defaults(func=cmd_enrich)

    p = sub.add_parser("train-r2cl", help="contrastive training with refined views")
    p.add_argument("--graph")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--period", type=int, default=5)
    p.add_argument("--anchors", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    llm_flags(p)
    p.set_defaults(func=cmd_train_r2cl)

    p = sub.add_parser("classify", help="train and evaluate a backbone classifier")
    p.add_argument("--graph")
    p.add_argument("--backbone", default="gcn", choices=ARCHITECTURES)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("grid", help="run an attack grid (GridSpec JSON)")
    p.add_argument("--grid", help="GridSpec JSON; defaults to the full 81-cell grid on synthetic data")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="curves and robustness reports from a results CSV")
    p.add_argument("--results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
        sub = parser._subparsers._group_actions[0].choices[args.command]  # the chosen subcommand parser
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [f"--{name}" for name in ("graph", "out", "samples", "results")
               if hasattr(args, name) and getattr(args, name) is None and not (name == "out" and args.command == "report")]
    if missing:
        parser.error(f"{args.command} needs {', '.join(missing)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
