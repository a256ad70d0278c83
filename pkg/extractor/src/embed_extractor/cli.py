"""Command-line interface: embed-extract extract --manifest ... --out ..."""

from __future__ import annotations

import argparse
import sys

from .curation import CurationRules
from .errors import ExtractorError
from .extract import extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-extract",
        description="Extract paired image/text embeddings into an MEB1 file.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="run the extraction pipeline")
    p.add_argument("--manifest", required=True,
                   help="CSV with columns image_path, caption, labels (semicolons)")
    p.add_argument("--checkpoint", required=True,
                   help="encoder checkpoint id, or 'mock[:seed]' for the "
                        "deterministic test backend")
    p.add_argument("--min-count", type=int, default=20,
                   help="drop labels with fewer occurrences (default 20)")
    p.add_argument("--normal-frac", type=float, default=0.5,
                   help="fraction of 'normal' rows to keep (default 0.5)")
    p.add_argument("--top-k", type=int, default=10,
                   help="keep only the k most frequent labels (default 10; "
                        "0 disables the cut)")
    p.add_argument("--exclude", action="append", default=[],
                   help="label name to exclude (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output MEB1 path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    rules = CurationRules(
        min_label_count=args.min_count,
        normal_downsample_fraction=args.normal_frac,
        excluded_labels=args.exclude,
        top_k_semantic_types=args.top_k,
        seed=args.seed,
    )
    try:
        log = extract(args.manifest, args.checkpoint, rules, args.out)
    except ExtractorError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"wrote {log.retained_rows} records "
          f"({len(log.label_table)} classes) to {args.out}")
    print(f"curation log: {args.out}.log.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
