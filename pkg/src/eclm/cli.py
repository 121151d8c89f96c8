"""Command-line interface.

Subcommands: pretrain (offline stage), run (online loop for one strategy),
derive (one-off sub-model derivation), inspect (artifact reports). Errors
exit nonzero with a machine-parsable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import errors
from .config import ScenarioConfig
from .derivation import (
    ImportanceVector,
    ResourceBudget,
    derive_submodel,
    importance_profile,
    validate_budget,
)
from .environment import ingest_csv, standardize_features
from .modular import cost_of
from .orchestrator import (
    STRATEGIES,
    inspect,
    load_checkpoint,
    run_offline,
    run_online,
)

EXIT_CODES = {
    errors.ConfigError: 2,
    errors.DataError: 3,
    errors.CheckpointError: 4,
    errors.InfeasibleBudgetError: 5,
    errors.SpecError: 6,
    errors.StalenessError: 7,
    errors.TrainingDivergedError: 8,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eclm", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="run the offline cloud stage")
    pre.add_argument("--config", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument(
        "--skip-enhance", action="store_true",
        help="stop after vanilla pretraining (no assignment / fine-tune artifacts)",
    )

    run = sub.add_parser("run", help="run the online collaborative loop")
    run.add_argument("--config", required=True)
    run.add_argument("--checkpoint", required=True)
    run.add_argument("--strategy", choices=STRATEGIES, default="eclm")
    run.add_argument("--out", required=True)

    der = sub.add_parser("derive", help="derive one personalized sub-model spec")
    der.add_argument("--checkpoint", required=True)
    der.add_argument("--profile", required=True, help="device profile JSON")
    der.add_argument("--comm-bytes", type=int, default=None)
    der.add_argument("--mem-bytes", type=int, default=None)
    der.add_argument("--macs", type=int, default=None)
    der.add_argument("--out", default=None, help="write the spec JSON here")

    ins = sub.add_parser("inspect", help="report on a checkpoint/CSV/jsonl artifact")
    ins.add_argument("path")
    return p


def _cmd_pretrain(args) -> int:
    cfg = ScenarioConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    run_offline(cfg, args.out, skip_enhance=args.skip_enhance, quiet=args.quiet)
    if not args.quiet:
        print(f"checkpoint written to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    metrics = run_online(cfg, args.checkpoint, args.strategy, args.out, quiet=args.quiet)
    if not args.quiet and metrics:
        print(
            f"{args.strategy}: {len(metrics)} rounds, "
            f"final global acc {metrics[-1].global_acc:.4f}"
        )
    return 0


def _cmd_derive(args) -> int:
    model, selector, _ = load_checkpoint(args.checkpoint)
    with open(args.profile) as fh:
        profile = json.load(fh)
    if "importance" in profile:
        importance = ImportanceVector(
            [np.asarray(v, dtype=np.float64) for v in profile["importance"]]
        )
    elif "dataset" in profile:
        data, _ = ingest_csv(profile["dataset"])
        (data,), _ = standardize_features(data)
        importance = importance_profile(selector, data)
    else:
        raise errors.ConfigError("profile needs 'importance' or a 'dataset' csv path")
    budget_doc = dict(profile.get("budget", {}))
    full = cost_of(model, selector)
    budget = ResourceBudget(
        args.comm_bytes or budget_doc.get("comm_bytes") or full.comm_bytes,
        args.macs or budget_doc.get("compute_macs") or full.compute_macs,
        args.mem_bytes or budget_doc.get("mem_bytes") or full.mem_bytes,
    )
    spec, info = derive_submodel(
        model, selector, importance, budget, device_id=profile.get("device_id")
    )
    report = validate_budget(model, selector, spec, budget)
    doc = {
        "spec": json.loads(spec.to_json()),
        "method": info["method"],
        "total_importance": info["total_importance"],
        "utilization": {
            k: report[k]["utilization"]
            for k in ("comm_bytes", "compute_macs", "mem_bytes")
        },
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _cmd_inspect(args) -> int:
    print(inspect(args.path))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "pretrain": _cmd_pretrain,
        "run": _cmd_run,
        "derive": _cmd_derive,
        "inspect": _cmd_inspect,
    }[args.command]
    try:
        return handler(args)
    except errors.EclmError as e:
        code = EXIT_CODES.get(type(e), 1)
        print(
            json.dumps({"error_class": type(e).__name__, "message": str(e)}),
            file=sys.stderr,
        )
        return code


if __name__ == "__main__":
    sys.exit(main())
