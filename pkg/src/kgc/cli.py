"""Command-line entry point.

Subcommands: stats, split, densify, train, eval, perm-test,
ablate-density. A JSON config file supplies defaults; any flag given on
the command line overrides the file. All randomness hangs off --seed.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import embeddings as emb
from . import evaluator, graph as kg, trainer

logger = logging.getLogger("kgc")

# train-config fields that may be overridden from the command line
_CONFIG_FLAGS = ("variant", "epochs", "lr", "l2_weight", "label_smoothing",
                 "grad_clip", "dropout", "subgraph_edges", "eval_every",
                 "mask_epochs", "mask_direction", "gcn_layers", "embed_dim",
                 "channels", "kernel_width", "batch_size", "precision", "seed")


def _add_config_flags(parser):
    defaults = trainer.TrainConfig()
    for name in _CONFIG_FLAGS:
        kind = type(getattr(defaults, name))
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name,
                            type=kind, default=None,
                            help=f"override config {name} "
                                 f"(default {getattr(defaults, name)})")


def _resolve_config(args):
    """Config-file values first, command-line overrides on top."""
    payload = {}
    if getattr(args, "config", None):
        payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        payload.pop("format", None)
    # non-TrainConfig keys (paths, densification knobs) share the same
    # file-then-flag precedence
    extras = {key: payload.pop(key, default) for key, default in
              (("data", None), ("embeddings", None), ("out_dir", None),
               ("tau", None), ("cap", None), ("block", 1024))}
    for name in _CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            payload[name] = value
    for key, value in extras.items():
        flag = getattr(args, key, None)
        if flag is not None and not (key == "block" and flag == 1024):
            extras[key] = flag
        setattr(args, key, extras[key])
    config = trainer.TrainConfig(**payload).validate()
    return config, extras


def _load_graph(data):
    if data is None:
        raise trainer.ConfigError("no dataset directory given (--data)")
    path = Path(data)
    if path.is_file():
        with open(path, "rb") as fh:
            first = fh.read(1)
        if first == b"{":  # graph cache file
            return kg.KnowledgeGraph.load(path)
        return kg.load_tuples(path)  # monolithic tuple TSV
    return kg.load_dataset_dir(path)


def _load_table(embeddings_path, graph, needed):
    if embeddings_path is None:
        if needed:
            raise trainer.ConfigError(
                "this variant needs --embeddings <file>")
        return None
    return emb.load_embeddings(embeddings_path, graph)


def _densify_if_requested(graph, table, config, args):
    if not trainer.VARIANTS[config.variant].uses_sim:
        return graph
    if table is None:
        raise trainer.ConfigError("sim variants need --embeddings to build "
                                  "similarity edges")
    threshold = args.tau
    if threshold is None and args.cap is not None:
        threshold = emb.select_threshold_cap(table, args.cap, block=args.block)
    if threshold is None:
        threshold = emb.select_threshold_tail(table, seed=config.seed)
    sim = emb.pairwise_similarity_edges(table, threshold, block=args.block)
    logger.info("densified with %d similarity pairs at threshold %.4f",
                len(sim), sim.threshold)
    return emb.densify(graph, sim)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_stats(args):
    g = _load_graph(args.data)
    stats = kg.compute_stats(g)
    print("nodes\tedges\trelations\tdensity\tavg_in_degree")
    print(f"{stats.num_nodes}\t{stats.num_edges}\t{stats.num_relations}"
          f"\t{stats.density:.3g}\t{stats.avg_in_degree:.2f}")
    if g.skipped_rows:
        print(f"# skipped {g.skipped_rows} rows with empty phrases",
              file=sys.stderr)
    return 0


def cmd_split(args):
    g = _load_graph(args.data)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    new = kg.make_random_split(g, ratios=ratios, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "dev", "test"):
        lines = []
        for e1, rel, e2 in new.splits[split]:
            lines.append(f"{new.relation_names[rel]}\t{new.phrases[e1]}"
                         f"\t{new.phrases[e2]}")
        (out / f"{split}.txt").write_text("".join(l + "\n" for l in lines),
                                          encoding="utf-8")
        print(f"{split}: {new.splits[split].shape[0]} edges")
    return 0


def cmd_densify(args):
    g = _load_graph(args.data)
    table = emb.load_embeddings(args.embeddings, g, args.phrases)
    if args.tau is not None:
        threshold = args.tau
    elif args.cap is not None:
        threshold = emb.select_threshold_cap(table, args.cap, block=args.block)
    elif args.tail:
        threshold = emb.select_threshold_tail(
            table, seed=args.seed, spread_multiplier=args.tail_multiplier)
    else:
        raise trainer.ConfigError("choose one of --tau, --cap, --tail")
    sim = emb.pairwise_similarity_edges(table, threshold, block=args.block)
    lines = [f"{g.phrases[i]}\t{g.phrases[j]}\t{s:.6f}"
             for (i, j), s in zip(sim.pairs, sim.scores)]
    body = "".join(l + "\n" for l in lines)
    if args.out:
        Path(args.out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)
    print(f"# threshold {sim.threshold:.2f} -> {len(sim)} pairs",
          file=sys.stderr)
    return 0


def cmd_train(args):
    config, paths = _resolve_config(args)
    logger.info("resolved config: %s", config.to_json())
    g = _load_graph(paths["data"])
    table = _load_table(paths["embeddings"], g,
                        trainer.VARIANTS[config.variant].text_source)
    g = _densify_if_requested(g, table, config, args)
    out_dir = Path(paths["out_dir"] or "kgc-out")
    result = trainer.train(g, config, text_table=table, out_dir=out_dir)
    print(f"best dev MRR {result.best_mrr:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _restore(args):
    """Rebuild (graph, model, table) from a checkpoint + its run config."""
    config_path = args.run_config or str(Path(args.checkpoint).parent
                                         / "run_config.json")
    config = trainer.TrainConfig.from_json(
        Path(config_path).read_text(encoding="utf-8"))
    g = _load_graph(args.data)
    table = _load_table(getattr(args, "embeddings", None), g,
                        trainer.VARIANTS[config.variant].text_source)
    g = _densify_if_requested(g, table, config, args)
    model = trainer.CompletionModel(config, g, table,
                                    rng=np.random.default_rng(config.seed))
    params, _ = ckpt.load_checkpoint(args.checkpoint)
    model.load_state(params)
    return g, model


def cmd_eval(args):
    g, model = _restore(args)
    report = evaluator.evaluate(trainer.ModelScorer(model, g), g, args.split)
    print(f"{args.split}: {report.table_row()}")
    return 0


def cmd_perm_test(args):
    g, model = _restore(args)
    delta, base, shuffled = evaluator.permutation_test(
        trainer.ModelScorer(model, g), g, args.split, seed=args.seed)
    print(f"base     {base.table_row()}")
    print(f"shuffled {shuffled.table_row()}")
    print(f"delta MRR {100 * delta:+.2f}")
    return 0


def cmd_ablate_density(args):
    config, paths = _resolve_config(args)
    logger.info("resolved config: %s", config.to_json())
    g = _load_graph(paths["data"])
    table = _load_table(paths["embeddings"], g,
                        trainer.VARIANTS[config.variant].text_source)
    g = _densify_if_requested(g, table, config, args)
    densities = [float(x) for x in args.densities.split(",")]
    out_csv = args.out or "density_ablation.csv"
    results = evaluator.density_ablation(g, densities, config,
                                         text_table=table, out_csv=out_csv)
    for density, report in results:
        print(f"density {density:.3g}: {report.table_row()}")
    print(f"wrote {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="kgc",
        description="Link prediction for sparse phrase-node knowledge graphs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="print dataset statistics")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("split", help="re-split a dataset at random")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("densify", help="emit similarity pairs above a threshold")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--phrases", default=None,
                   help="phrase sidecar (default: <embeddings>.phrases)")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--tail", action="store_true")
    p.add_argument("--tail-multiplier", type=float, default=4.0)
    p.add_argument("--block", type=int, default=1024)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_densify)

    for name, fn in (("train", cmd_train), ("ablate-density", cmd_ablate_density)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--data", default=None)
        p.add_argument("--embeddings", default=None)
        p.add_argument("--out-dir", dest="out_dir", default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--cap", type=int, default=None)
        p.add_argument("--block", type=int, default=1024)
        _add_config_flags(p)
        if name == "ablate-density":
            p.add_argument("--densities", required=True,
                           help="comma-separated target densities, descending")
            p.add_argument("--out", default=None)
        p.set_defaults(fn=fn)

    for name, fn in (("eval", cmd_eval), ("perm-test", cmd_perm_test)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--run-config", default=None,
                       help="default: run_config.json next to the checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--embeddings", default=None)
        p.add_argument("--split", default="dev",
                       choices=("train", "dev", "test"))
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--cap", type=int, default=None)
        p.add_argument("--block", type=int, default=1024)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(fn=fn)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (trainer.ConfigError, trainer.TrainingDiverged, ValueError,
            RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
