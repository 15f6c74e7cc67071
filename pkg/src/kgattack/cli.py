"""Command-line entry point: ``kgattack <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph, load_dataset, save_dataset
from .synthetic import SyntheticConfig, generate

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


def _kg(spec: str) -> KnowledgeGraph:
    """``synthetic``, ``synthetic:<seed>`` or a dataset directory."""
    if spec == "synthetic" or spec.startswith("synthetic:"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return generate(SyntheticConfig(seed=seed))
    return load_dataset(spec)


def _target(kg: KnowledgeGraph, target_id: int):
    test = kg.triples("test")
    if not 0 <= target_id < len(test):
        raise SystemExit(f"--target-id must lie in [0, {len(test)})")
    return test[target_id]


def _label(kg, t) -> str:
    return f"({kg.entity_labels[t[0]]}, {kg.relation_labels[t[1]]}, {kg.entity_labels[t[2]]})"


def cmd_generate(args):
    kg = generate(SyntheticConfig(seed=args.seed))
    save_dataset(kg, args.out)
    print(f"wrote {kg.num_entities} entities, {len(kg.train)}/{len(kg.valid)}/{len(kg.test)} triples to {args.out}")


def cmd_train(args):
    from .kge import default_config, evaluate, save_model, train

    kg = _kg(args.dataset)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("dim", args.dim), ("seed", args.seed)) if v is not None}
    model = train(kg, default_config(args.arch, **overrides))
    save_model(model, args.out)
    if len(kg.valid):
        res = evaluate(model, kg, kg.triples("valid"))
        print(json.dumps({"checkpoint": str(args.out), "valid": res.summary()}, sort_keys=True))


def cmd_evaluate(args):
    from .harness import read_targets
    from .kge import evaluate, load_model

    kg = _kg(args.dataset)
    model = load_model(args.checkpoint)
    targets = read_targets(args.targets) if args.targets else kg.triples(args.split)
    res = evaluate(model, kg, targets)
    print(json.dumps({"architecture": model.architecture, "n": len(targets), **res.summary()}, sort_keys=True))


def cmd_filter_entities(args):
    from .centrality import centrality_filter

    kg = _kg(args.dataset)
    tgt = _target(kg, args.target_id)
    cands = centrality_filter(kg, tgt, args.h, args.k)
    print(f"target {_label(kg, tgt)}: {len(cands)} candidates")
    for i, c in enumerate(cands, 1):
        print(f"{i}. {kg.entity_labels[c.item]}\t{c.provenance}\t{c.score:.4f}")


def cmd_hoa_train(args):
    from . import hoa

    kg = _kg(args.dataset)
    feats = hoa.cached_features(kg, args.checkpoint, args.h, args.cache_dir or Path(args.out).parent)
    head = hoa.train_hoa_classifier(kg, feats, hoa.HoaConfig(epochs=args.epochs, seed=args.seed))
    hoa.save_head(head, args.out, {"features": feats.source})
    heldout = np.vstack([kg.valid, kg.test])
    rows, labels = hoa.labelled_pairs(heldout, kg, np.random.default_rng(args.seed))
    acc = hoa.classification_accuracy(head, feats, rows, labels) if len(rows) else float("nan")
    print(json.dumps({"head": str(args.out), "heldout_accuracy": acc, "alpha": head.alpha.tolist()}))


def cmd_hoa_filter(args):
    from . import hoa
    from .kg import build_triple_graph

    kg = _kg(args.dataset)
    feats = hoa.cached_features(kg, args.checkpoint, args.h, args.cache_dir or Path(args.head).parent)
    head = hoa.load_head(args.head)
    tgt = _target(kg, args.target_id)
    cands = hoa.hoa_filter(build_triple_graph(kg), head, feats, tgt, args.k)
    print(f"target {_label(kg, tgt)}")
    for i, c in enumerate(cands, 1):
        print(f"{i}. {_label(kg, c.item)}\t{c.score:.4f}")


def cmd_run(args):
    from .harness import ConfigError, load_config, run_experiment
    from .report import emit_report, render_table

    try:
        config = load_config(args.config)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    report = run_experiment(config)
    paths = emit_report(report, config.output_dir)
    print(render_table(report), end="")
    print(f"report: {paths['json']}")
    if report.status != "complete":
        for f in report.failures:
            print(f"failure: seed={f['seed']} stage={f['stage']} {f['error']}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgattack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic KG as TSV files")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one KGE model and save a checkpoint")
    t.add_argument("--dataset", "--data-dir", dest="dataset", default="synthetic")
    t.add_argument("--arch", required=True, choices=("transe", "distmult", "complex", "conve"))
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--dim", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="filtered MRR/Hits@k of a checkpoint")
    e.add_argument("--dataset", "--data-dir", dest="dataset", default="synthetic")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--targets", help="TSV of entity-id triples; defaults to --split")
    e.add_argument("--split", default="test", choices=("valid", "test"))
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("filter-entities", help="centrality filter for one test triple")
    f.add_argument("--dataset", "--data-dir", dest="dataset", default="synthetic")
    f.add_argument("--target-id", type=int, required=True, help="row of the test split")
    f.add_argument("--k", type=int, default=30)
    f.add_argument("--h", type=int, default=3)
    f.set_defaults(func=cmd_filter_entities)

    ht = sub.add_parser("hoa-train", help="train the HoA triple classifier")
    ht.add_argument("--dataset", "--data-dir", dest="dataset", default="synthetic")
    ht.add_argument("--checkpoint", required=True, help="TransE checkpoint for H^0")
    ht.add_argument("--out", required=True)
    ht.add_argument("--h", type=int, default=3)
    ht.add_argument("--epochs", type=int, default=200)
    ht.add_argument("--seed", type=int, default=0)
    ht.add_argument("--cache-dir")
    ht.set_defaults(func=cmd_hoa_train)

    hf = sub.add_parser("hoa-filter", help="HoA filter for one test triple")
    hf.add_argument("--dataset", "--data-dir", dest="dataset", default="synthetic")
    hf.add_argument("--checkpoint", required=True)
    hf.add_argument("--head", required=True)
    hf.add_argument("--target-id", type=int, required=True)
    hf.add_argument("--k", type=int, default=5)
    hf.add_argument("--h", type=int, default=3)
    hf.add_argument("--cache-dir")
    hf.set_defaults(func=cmd_hoa_filter)

    r = sub.add_parser("run", help="full experiment from a TOML config")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except Exception as exc:
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
