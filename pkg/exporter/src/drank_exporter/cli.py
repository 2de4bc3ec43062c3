"""drank-export: convert a checkpoint to .dst stores for the compression engine."""

from __future__ import annotations

import argparse
from pathlib import Path

from .export import CalibrationConfig, capture_gram, export_weights, load_model


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drank-export", description=__doc__)
    p.add_argument("--model", required=True, help="checkpoint path or hub id")
    p.add_argument("--weights-out", default="weights.dst")
    p.add_argument("--gram-out", default="gram.dst")
    p.add_argument("--manifest-out", default="manifest.json")
    p.add_argument(
        "--corpus",
        default="wikitext2",
        help="wikitext2, synthetic, or a local text file (default wikitext2)",
    )
    p.add_argument("--samples", type=int, default=256, help="calibration sequences (default 256)")
    p.add_argument("--seqlen", type=int, default=2048, help="tokens per sequence (default 2048)")
    p.add_argument("--seed", type=int, default=0, help="corpus sampling seed, recorded in metadata")
    p.add_argument("--no-gram", action="store_true", help="export weights and manifest only")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    model = load_model(args.model)
    manifest = export_weights(model, args.weights_out, args.manifest_out)
    print(
        f"wrote {args.weights_out} and {args.manifest_out}: "
        f"{manifest['layers']} layers, {manifest['attention_kind']}"
    )
    if args.no_gram:
        return 0
    cfg = CalibrationConfig(
        model=args.model,
        corpus=args.corpus,
        sample_count=args.samples,
        sequence_length=args.seqlen,
        seed=args.seed,
        weights_out=Path(args.weights_out),
        gram_out=Path(args.gram_out),
        manifest_out=Path(args.manifest_out),
    )
    capture_gram(cfg, model=model)
    print(f"wrote {args.gram_out}: {args.samples} x {args.seqlen} tokens from {args.corpus}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
