"""Command-line entry point.

Subcommands: synth, split, train, eval, bench, ablate. Configuration comes
from a plain-text key=value file (--config) with command-line overrides on
top. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (
    SyntheticSpec,
    generate_synthetic,
    read_records,
    split_dataset,
    write_records,
)
from .errors import ConfigError, DataError, DivergenceError
from .hashing import benchmark
from .training import (
    LOSS_ABLATION,
    MODULE_ABLATION,
    TrainConfig,
    ablate,
    apply_flat_options,
    evaluate_artifacts,
    parse_config_file,
    save_model,
    train,
)
from . import report as rpt

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _add_override_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--data", help="MEB1 embedding file")
    parser.add_argument("--synthetic", action="store_true",
                        help="use the synthetic clustered corpus")
    parser.add_argument("--classes", type=int, help="synthetic class count")
    parser.add_argument("--per-class", type=int, help="synthetic samples per class")
    parser.add_argument("--spread", type=float, help="synthetic cluster spread")
    parser.add_argument("--bits", help="code length(s), e.g. 16 or 16,32,64")
    parser.add_argument("--experts", type=int, help="number of experts")
    parser.add_argument("--voting-k", type=int, help="vote count K (0 disables voting)")
    parser.add_argument("--frozen", help="freeze the voting MLP (true/false)")
    parser.add_argument("--gating-loss", choices=["switch", "variance", "hybrid", "none"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--lr-moe", type=float)
    parser.add_argument("--lr-hash", type=float)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--no-figures", action="store_true",
                        help="skip rendering PNG figures")


def _parse_bits(text: str | None, default: list[int]) -> list[int]:
    if not text:
        return default
    try:
        return [int(b) for b in str(text).split(",") if b.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse bit list from {text!r}") from None


def _build_config(args: argparse.Namespace, bits: int | None = None) -> TrainConfig:
    """Defaults <- config file <- CLI flags, in increasing precedence."""
    options: dict[str, str] = {}
    if args.config:
        options.update(parse_config_file(args.config))
    if args.data:
        options["data"] = args.data
    if getattr(args, "classes", None) is not None:
        options["synth.num_classes"] = str(args.classes)
    if getattr(args, "per_class", None) is not None:
        options["synth.samples_per_class"] = str(args.per_class)
    if getattr(args, "spread", None) is not None:
        options["synth.cluster_spread"] = str(args.spread)
    if bits is not None:
        options["code_bits"] = str(bits)
    if args.experts is not None:
        options["moe.num_experts"] = str(args.experts)
    if args.voting_k is not None:
        if args.voting_k == 0:
            options["voting.enabled"] = "false"
        else:
            options["voting.enabled"] = "true"
            options["voting.k"] = str(args.voting_k)
    if args.frozen is not None:
        options["voting.frozen"] = args.frozen
    if args.gating_loss is not None:
        options["loss.gating_mode"] = args.gating_loss
    if args.seed is not None:
        options["seed"] = str(args.seed)
    if args.epochs is not None:
        options["epochs"] = str(args.epochs)
    if args.batch is not None:
        options["batch_size"] = str(args.batch)
    if args.lr_moe is not None:
        options["lr_moe"] = str(args.lr_moe)
    if args.lr_hash is not None:
        options["lr_hash"] = str(args.lr_hash)
    if args.temperature is not None:
        options["loss.temperature"] = str(args.temperature)

    synthetic_requested = args.synthetic or any(k.startswith("synth.") for k in options)
    if synthetic_requested and args.seed is not None:
        # The corpus seed follows the experiment seed unless set explicitly.
        options.setdefault("synth.seed", str(args.seed))

    cfg = TrainConfig()
    if synthetic_requested:
        cfg.synthetic = SyntheticSpec()
    cfg = apply_flat_options(cfg, options)
    if cfg.data_path is None and cfg.synthetic is None:
        cfg.synthetic = SyntheticSpec(seed=cfg.seed)
    return cfg


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes or 10,
        samples_per_class=args.per_class or 200,
        cluster_spread=args.spread if args.spread is not None else 0.1,
        seed=args.seed or 0,
    )
    records = generate_synthetic(spec)
    write_records(args.out, records)
    print(f"wrote {len(records)} records ({spec.num_classes} classes) to {args.out}")
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    records = read_records(args.data, expected_dims=(512, 512))
    split = split_dataset(len(records), args.seed or 0)
    payload = {
        "seed": args.seed or 0,
        "sizes": {"query": len(split.query), "retrieval": len(split.retrieval),
                  "train": len(split.train)},
        "query": split.query.tolist(),
        "retrieval": split.retrieval.tolist(),
        "train": split.train.tolist(),
    }
    Path(args.out).write_text(json.dumps(payload))
    print(f"split {len(records)} records "
          f"{payload['sizes']['query']}/{payload['sizes']['retrieval']}"
          f"/{payload['sizes']['train']} -> {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    bits = _parse_bits(args.bits, default=[])
    if len(bits) > 1:
        raise ConfigError("train runs one bit length at a time; use ablate or "
                          "separate runs for multiple code lengths")
    cfg = _build_config(args, bits=bits[0] if bits else None)
    out = _out_dir(args)
    result = train(cfg)
    save_model(out / f"model_{cfg.code_bits}", result.model)
    rpt.write_metrics_json(out / "metrics.json", result.report)
    rpt.write_epoch_csv(out / "epochs.csv", result.report)
    if not args.no_figures:
        rpt.plot_loss_curves(out, result.report)
        rpt.plot_expert_utilization(out, result.report)
    final = result.report.final_map[str(cfg.code_bits)]
    print(f"final mAP ({cfg.code_bits}-bit): i2t={final['i2t']:.4f} "
          f"t2i={final['t2i']:.4f} mean={final['mean']:.4f}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    records = read_records(args.data, expected_dims=(512, 512))
    bits = _parse_bits(args.bits, default=None) if args.bits else None
    report = evaluate_artifacts(args.artifacts, records, code_bits=bits)
    out = _out_dir(args)
    rpt.write_metrics_json(out / "metrics.json", report)
    if args.dump_codes:
        _dump_eval_codes(out, args.artifacts, records)
    for bits_key, values in report.final_map.items():
        print(f"{bits_key}-bit: i2t={values['i2t']:.4f} t2i={values['t2i']:.4f} "
              f"mean={values['mean']:.4f}")
    return EXIT_OK


def _dump_eval_codes(out: Path, prefixes: list[str], records) -> None:
    from .hashing import RetrievalIndex, write_codes
    from .training import encode_subset, load_model
    from .data import concat_all, split_dataset
    from . import rng

    fused = concat_all(records)
    for prefix in prefixes:
        model, cfg = load_model(prefix)
        split = split_dataset(len(records), cfg.seed)
        masks = rng.stream(cfg.seed, "voting-eval")
        r_img, r_txt = encode_subset(model, fused, split.retrieval, masks)
        labels = records.class_ids[split.retrieval]
        write_codes(out / f"retrieval_image_{cfg.code_bits}.mhc",
                    RetrievalIndex(r_img, labels, "image"))
        write_codes(out / f"retrieval_text_{cfg.code_bits}.mhc",
                    RetrievalIndex(r_txt, labels, "text"))


def cmd_bench(args: argparse.Namespace) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    bits = _parse_bits(args.bits, default=[16, 32, 64])
    rows = benchmark(sizes, bits, repetitions=args.reps,
                     num_queries=args.queries, seed=args.seed or 0)
    out = _out_dir(args)
    rpt.write_benchmark(out / "bench.csv", out / "bench.json", rows)
    if not args.no_figures:
        rpt.plot_benchmark(out, rows)
    for row in rows:
        print(f"n={row.corpus_size} b={row.code_bits}: hash {row.median_us_hash:.1f}us "
              f"float {row.median_us_float:.1f}us ratio {row.ratio:.2f} "
              f"bytes {row.bytes_hash}/{row.bytes_float}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)
    variants: list[dict] = []
    if args.matrix in ("module", "all"):
        variants += MODULE_ABLATION
    if args.matrix in ("loss", "all"):
        variants += LOSS_ABLATION
    bits = _parse_bits(args.bits, default=[cfg.code_bits])
    rows, reports = ablate(cfg, variants, code_bits=bits)
    rpt.write_ablation_csv(out / "table.csv", rows, bits)
    for key, rep in reports.items():
        safe = key.replace("+", "_").replace("@", "_")
        rpt.write_epoch_csv(out / f"epochs_{safe}.csv", rep)
    if not args.no_figures:
        rpt.plot_map_bars(out, rows, bits)
    for row in rows:
        cells = " ".join(
            f"[{b}] {v.get('i2t', 0):.3f}/{v.get('t2i', 0):.3f}/{v.get('mean', 0):.3f}"
            for b, v in row.per_bits.items()
        )
        print(f"{row.name:28s} {cells}")
    print(f"table written to {out / 'table.csv'}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionhash",
        description="Cross-modal fusion hashing: train, evaluate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic MEB1 embedding file")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="compute the query/retrieval/train split")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the full pipeline")
    _add_override_args(p)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved model artifacts")
    p.add_argument("--artifacts", nargs="+", required=True,
                   help="artifact prefixes (one per bit length)")
    p.add_argument("--data", required=True)
    p.add_argument("--bits", help="bit lengths to evaluate, e.g. 16,32")
    p.add_argument("--dump-codes", action="store_true",
                   help="also dump retrieval codes as MHC1 files")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="hash vs float retrieval benchmark")
    p.add_argument("--sizes", default="50000")
    p.add_argument("--bits", default="16,32,64")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    _add_override_args(p)
    p.add_argument("--matrix", choices=["module", "loss", "all"], default="all")
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
