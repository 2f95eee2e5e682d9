"""export-embeddings: phrase file in, binary embedding table out."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .exporter import DEFAULT_MODEL, ExportJob, ModelUnavailable, run_export


def build_parser():
    parser = argparse.ArgumentParser(
        prog="export-embeddings",
        description="Encode one embedding row per phrase with a masked "
                    "language model, optionally adapted to the phrases.")
    parser.add_argument("--phrases", required=True,
                        help="text file, one phrase per line (graph order)")
    parser.add_argument("--out", required=True, help="output binary table")
    parser.add_argument("--model", default=DEFAULT_MODEL,
                        help="model id or local checkpoint directory")
    parser.add_argument("--no-finetune", action="store_true",
                        help="skip adaptation, encode with the base model")
    parser.add_argument("--epochs", type=int, default=1)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--lr", type=float, default=3e-5)
    parser.add_argument("--max-seq-len", type=int, default=64)
    parser.add_argument("--warmup", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    phrases = Path(args.phrases).read_text(encoding="utf-8").splitlines()
    job = ExportJob(model=args.model, output=args.out,
                    max_seq_len=args.max_seq_len, batch_size=args.batch_size,
                    lr=args.lr, warmup_proportion=args.warmup,
                    epochs=args.epochs, seed=args.seed,
                    finetune=not args.no_finetune)
    try:
        vectors = run_export(phrases, job)
    except (ModelUnavailable, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {vectors.shape[0]} x {vectors.shape[1]} rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
