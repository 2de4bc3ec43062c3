"""Command-line interface: plan, compress, verify, bench, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .pipeline import CompressionPlan, ModelManifest
from .tensor_store import load_store


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="model manifest (.json)")
    p.add_argument("--model", required=True, help="weight store (.dst)")
    p.add_argument("--gram", required=True, help="gram statistics store (.dst)")


def _add_plan_args(p: argparse.ArgumentParser, ratio_required: bool = True) -> None:
    p.add_argument("--ratio", type=float, required=ratio_required, help="compression ratio theta in (0,1)")
    p.add_argument("--beta", type=float, default=0.3, help="Q/K to V rank transfer ratio (default 0.3)")
    p.add_argument(
        "--group-size",
        type=int,
        default=None,
        help="layers per group for groupable roles (default 2; forced 1 for GQA)",
    )
    p.add_argument("--pooled-budget", action="store_true", help="one budget across all matrix types")
    p.add_argument("--lower-cholesky", action="store_true", help="A/B switch: whiten with the lower factor")


def _make_plan(args) -> tuple[ModelManifest, CompressionPlan]:
    manifest = ModelManifest.load(args.manifest)
    plan = pipeline.plan(
        manifest,
        load_store(args.model),
        load_store(args.gram),
        theta=args.ratio,
        beta=args.beta,
        group_size=args.group_size,
        pooled_budget=args.pooled_budget,
        lower_cholesky=args.lower_cholesky,
    )
    return manifest, plan


def cmd_plan(args) -> int:
    _, plan = _make_plan(args)
    text = json.dumps(plan.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    for w in plan.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_compress(args) -> int:
    manifest = ModelManifest.load(args.manifest)
    if args.plan:
        plan = CompressionPlan.from_json(Path(args.plan).read_text())
    else:
        if args.ratio is None:
            raise SystemExit("compress needs either --plan or --ratio")
        _, plan = _make_plan(args)
    blob, _reports = pipeline.compress_model(
        plan,
        manifest,
        load_store(args.model),
        load_store(args.gram),
        store_dtype=args.store_dtype,
    )
    Path(args.out).write_bytes(blob)
    print(
        f"wrote {args.out}: {plan.total_spent} of {plan.total_original} parameters "
        f"({plan.stored_ratio:.4f} stored, target <= {1 - plan.theta:.4f})"
    )
    for w in plan.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    manifest = ModelManifest.load(args.manifest)
    report = pipeline.verify(
        manifest,
        load_store(args.model),
        load_store(args.gram),
        load_store(args.compressed),
    )
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if report["ok"]:
        print(f"verify OK: {len(report['groups'])} groups, stored ratio {report['stored_ratio']:.4f}")
        return 0
    print(f"verify FAILED: flagged groups {report['flagged']}", file=sys.stderr)
    return 1


def cmd_bench(args) -> int:
    result = pipeline.bench(
        d1=args.d1,
        d2=args.d2,
        k=args.k,
        token_batch=args.tokens,
        repeats=args.repeats,
        seed=args.seed,
    )
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(
        f"dense {result['dense_tokens_per_sec']:.0f} tok/s, "
        f"factored {result['factored_tokens_per_sec']:.0f} tok/s, "
        f"speedup {result['speedup']:.2f}x (flop ratio {result['flop_ratio']:.3f}, "
        f"agreement {result['agreement_rel_err']:.2e})"
    )
    return 0


def cmd_report(args) -> int:
    doc = json.loads(Path(args.input).read_text())
    if "roles" in doc:  # plan document
        plan = CompressionPlan.from_dict(doc)
        print(f"plan: theta={plan.theta} beta={plan.beta} (effective {plan.beta_effective:.4f}) "
              f"attention={plan.attention_kind} whitener={plan.whitener}")
        print(f"{'role':6} {'grp':>3} {'members':16} {'R_eff':>9} {'k_unif':>7} {'k_real':>9} {'k':>6} {'omega':>7} {'params':>10}")
        for role, rp in plan.roles.items():
            for gp in rp.groups:
                members = ",".join(str(m) for m in gp.members)
                print(
                    f"{role:6} {gp.index:>3} {members:16} {gp.effective_rank:>9.1f} "
                    f"{gp.k_uniform:>7} {gp.k_real:>9.2f} {gp.k_int:>6} {gp.omega:>7} {gp.params:>10}"
                )
            print(f"{role:6} budget {rp.budget:.1f}, spent {rp.spent}")
        print(
            f"total: {plan.total_spent}/{plan.total_original} parameters stored "
            f"({plan.stored_ratio:.4f}; target <= {1 - plan.theta:.4f})"
        )
        for w in plan.warnings:
            print(f"warning: {w}")
        return 0
    if "groups" in doc:  # verification document
        print(f"verification: {len(doc['groups'])} groups, ok={doc['ok']}")
        for g in doc["groups"]:
            mark = "FLAG" if g["flagged"] else "ok"
            print(f"  {g['role']}/{g['group']} k={g['k']} max_rel_disagreement={g['max_rel_disagreement']:.2e} {mark}")
        return 0 if doc["ok"] else 1
    print("unrecognized report document", file=sys.stderr)
    return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="allocate ranks and write the plan document")
    _add_model_args(p)
    _add_plan_args(p)
    p.add_argument("--out", default=None, help="plan output path (.json); stdout when omitted")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compress", help="compress a model into a factored store")
    _add_model_args(p)
    _add_plan_args(p, ratio_required=False)
    p.add_argument("--plan", default=None, help="reuse a previously written plan document")
    p.add_argument("--store-dtype", choices=sorted(pipeline.STORE_DTYPES), default="f32")
    p.add_argument("--out", required=True, help="compressed store output path (.dst)")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("verify", help="recompute errors from a compressed store")
    _add_model_args(p)
    p.add_argument("--compressed", required=True, help="compressed store (.dst)")
    p.add_argument("--out", default=None, help="verification report output path (.json)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="dense vs factored GEMM throughput")
    p.add_argument("--d1", type=int, required=True)
    p.add_argument("--d2", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render a plan or verification document")
    p.add_argument("input", help="plan.json or verification.json")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
