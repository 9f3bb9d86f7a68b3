"""Command-line interface.

Subcommands: build-graph, search-paths, gen-synthetic, train, eval,
gradcheck, bias-report. Exit status 0 on success, 1 on any handled
error, 2 on usage errors (argparse's convention).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data_io, evaluation, training, ug_store
from .attention_model import make_loss_fn
from .numerics import finite_difference_check


def _load_relation_surfaces(path) -> dict[str, tuple[str, ...]]:
    surfaces: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rel, toks = ug_store._split_line(path, lineno, line, 2)
            surfaces[rel] = tuple(toks.split(" "))
    return surfaces


def _graph_from_args(args) -> ug_store.UniversalGraph:
    surfaces = (
        _load_relation_surfaces(args.relation_surfaces)
        if args.relation_surfaces
        else None
    )
    graph = ug_store.load_graph(args.entities, args.kg_edges, args.text_edges, surfaces)
    graph.freeze()
    return graph


def cmd_build_graph(args) -> int:
    graph = _graph_from_args(args)
    summary = (
        f"entities\t{graph.num_entities}\n"
        f"kg_edges\t{len(graph.kg_edges)}\n"
        f"text_edges\t{len(graph.text_edges)}\n"
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "graph_summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(summary)
    sys.stdout.write(summary)
    return 0


def cmd_search_paths(args) -> int:
    graph = _graph_from_args(args)
    if args.pairs:
        pairs = []
        with open(args.pairs, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                e1, e2 = ug_store._split_line(args.pairs, lineno, line, 2)
                pairs.append((e1, e2))
    elif args.e1 and args.e2:
        pairs = [(args.e1, args.e2)]
    else:
        print("error: provide --pairs or both --e1 and --e2", file=sys.stderr)
        return 2
    n_paths = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, (e1, e2) in enumerate(pairs):
            paths = graph.random_walk_paths(
                e1,
                e2,
                max_steps=args.max_steps,
                num_walks=args.num_walks,
                seed=args.seed + i,
                max_paths=args.max_paths,
            )
            ug_store.dump_paths(paths, fh)
            n_paths += len(paths)
    print(f"wrote {n_paths} paths for {len(pairs)} pairs to {args.out}")
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = data_io.SyntheticSpec(
        n_entities=args.entities,
        n_relations=args.relations,
        noise=args.noise,
        sentences_per_bag=args.sentences_per_bag,
        paths_per_bag=args.paths_per_bag,
        seed=args.seed,
    )
    dataset, rules, graph = data_io.generate_synthetic(spec)
    data_io.save_dataset(dataset, args.out)
    data_io.save_rules(rules, os.path.join(args.out, "rules.txt"))
    ug_store.save_graph(
        graph,
        os.path.join(args.out, "entities.txt"),
        os.path.join(args.out, "kg_edges.tsv"),
        os.path.join(args.out, "text_edges.tsv"),
    )
    training.save_config(desk_config(), os.path.join(args.out, "config.txt"))
    print(
        f"generated {len(dataset.train_bags)} train / {len(dataset.test_bags)} test bags "
        f"over {len(dataset.entities)} entities into {args.out}"
    )
    return 0


def desk_config() -> training.TrainConfig:
    """Defaults sized for the synthetic desk-scale datasets."""
    return training.TrainConfig(
        lr_net=0.1,
        batch_size=10,
        word_dim=24,
        kg_dim=16,
        pos_dim=5,
        filters=24,
        epochs=10,
        pretrain_epochs=2,
        j=5,
        maxdist=20,
        seed=13,
    )


def _config_for(args) -> training.TrainConfig:
    path = args.config or os.path.join(args.data, "config.txt")
    return training.load_config(path)


def cmd_train(args) -> int:
    config = _config_for(args)
    if args.mode:
        config.mode = args.mode
    if args.pretrain:
        config.pretrain = True
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    dataset = data_io.load_dataset(args.data)
    result = training.train_with_config(config, dataset, out_dir=args.out)
    last = result.trace[-1]
    print(
        f"trained {len(result.trace)} epochs over {len(result.stages)} stages; "
        f"final loss {last[2]:.6f}; outputs in {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    config = _config_for(args)
    if args.mode:
        config.mode = args.mode
    dataset = data_io.load_dataset(args.data)
    model = training.load_model(config, dataset, args.checkpoint)
    summary = evaluation.write_eval_outputs(
        args.out, model, dataset.test_bags, dataset.gold_triplets
    )
    print(
        f"auc {summary['auc']:.4f} (step {summary['auc_step']:.4f}) "
        f"over {summary['records']} candidate records; reports in {args.out}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    config = _config_for(args)
    config.rht_grad = True  # route attention gradients into the entity table
    dataset = data_io.load_dataset(args.data)
    bags = dataset.train_bags[: args.bags]
    if not bags:
        print("error: no training bags to check", file=sys.stderr)
        return 1
    modes = ("base", "ranking") if args.mode == "both" else (args.mode,)
    all_ok = True
    for mode in modes:
        config.mode = mode
        model = _fresh_model(config, dataset)
        report = finite_difference_check(
            make_loss_fn(model, bags),
            model.slots(),
            epsilon=args.epsilon,
            tolerance=args.tolerance,
            coords_per_param=args.coords_per_param,
            rng=np.random.default_rng(config.seed),
        )
        status = "ok" if report.passed else "FAILED"
        print(f"mode {mode}: {report.summary()} [{status}]")
        for entry in report.failures[:10]:
            print(
                f"  {entry.param}[{entry.index}]: analytic {entry.analytic:.6e} "
                f"vs numeric {entry.numeric:.6e} (rel err {entry.rel_err:.3e})"
            )
        all_ok = all_ok and report.passed
    return 0 if all_ok else 1


def _fresh_model(config: training.TrainConfig, dataset):
    from .attention_model import build_model
    from .encoders import Vocab

    vocab = Vocab.build(dataset.token_sources())
    return build_model(
        config.model_config(),
        sorted(dataset.entities),
        dataset.relations,
        vocab,
        np.random.default_rng(config.seed),
    )


def cmd_bias_report(args) -> int:
    config = _config_for(args)
    if args.mode:
        config.mode = args.mode
    dataset = data_io.load_dataset(args.data)
    model = training.load_model(config, dataset, args.checkpoint)
    report = evaluation.attention_bias_report(
        model, dataset.test_bags, bucket_width=args.bucket_width
    )
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "attention_bias.csv")
    evaluation.write_bias_csv(report, out_path)
    for name, count, mean in report.by_type:
        print(f"type {name}: n={count} mean_weight={mean:.6f}")
    for name, count, mean in report.by_length:
        print(f"length {name}: n={count} mean_weight={mean:.6f}")
    print(f"wrote {out_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ugre",
        description="Universal-graph distantly supervised relation extraction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_graph_args(p):
        p.add_argument("--entities", required=True, help="entity file (id TAB surface)")
        p.add_argument("--kg-edges", required=True, help="KG edge file")
        p.add_argument("--text-edges", required=True, help="textual edge file")
        p.add_argument("--relation-surfaces", help="relation display tokens (rel TAB tokens)")

    p = sub.add_parser("build-graph", help="load and summarize a universal graph")
    add_graph_args(p)
    p.add_argument("--out", help="directory for graph_summary.txt")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("search-paths", help="random-walk path retrieval for entity pairs")
    add_graph_args(p)
    p.add_argument("--pairs", help="pair file (e1 TAB e2 per line)")
    p.add_argument("--e1")
    p.add_argument("--e2")
    p.add_argument("--max-steps", type=int, default=3)
    p.add_argument("--num-walks", type=int, default=1000)
    p.add_argument("--max-paths", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path dump file")
    p.set_defaults(func=cmd_search_paths)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic rule-planted dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--relations", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--sentences-per-bag", type=int, default=2)
    p.add_argument("--paths-per-bag", type=int, default=12)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="config file (default: <data>/config.txt)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain", action="store_true", help="staged path-type pretraining")
    p.add_argument("--mode", choices=("base", "ranking"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config file (default: <data>/config.txt)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("base", "ranking"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    p.add_argument("--config", help="config file (default: <data>/config.txt)")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("base", "ranking", "both"), default="both")
    p.add_argument("--bags", type=int, default=3)
    p.add_argument("--coords-per-param", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bias-report", help="attention-weight diagnostics by type and length")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config file (default: <data>/config.txt)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("base", "ranking"))
    p.add_argument("--bucket-width", type=int, default=10)
    p.set_defaults(func=cmd_bias_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:  # console-script entry point
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
