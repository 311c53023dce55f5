"""Command-line harness: train, eval, ablate, robustness, params.

Every command materializes its full configuration into the run directory
and emits machine-readable artifacts (ndjson/csv/json) next to rendered
figures. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import ConfigError, apply_overrides, load_config, validate_config
from .engine import (
    EVAL_MODES,
    count_params,
    evaluate,
    load_checkpoint,
    load_split,
    partition_parameters,
    train_run,
)
from .model import build_model
from .report import (
    format_table,
    render_ablation_figure,
    render_robustness_figure,
    render_training_curves,
    write_table,
)

ABLATION_VARIANTS = [
    ("base", False, False, False),
    ("cpia", True, False, False),
    ("cpia_dgfm", True, True, False),
    ("full", True, True, True),
]


def make_run_dir(out: str | None, name: str) -> Path:
    base = Path(out) if out else Path("runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{stamp}-{name}"
    suffix = 1
    while candidate.exists():
        suffix += 1
        candidate = base / f"{stamp}-{name}-{suffix}"
    candidate.mkdir(parents=True)
    return candidate


def _prepare_config(args, overrides: list[str]):
    config = load_config(args.config)
    config = apply_overrides(config, overrides)
    if args.seed is not None:
        config["seed"] = args.seed
    validate_config(config)
    return config


def _variant_config(config, use_cpia: bool, use_dgfm: bool, use_mcrm: bool):
    config = json.loads(json.dumps(config))
    config["cpia"]["enabled"] = use_cpia
    config["dgfm"]["enabled"] = use_dgfm
    config["mcrm"]["enabled"] = use_mcrm
    return config


def cmd_train(args, overrides: list[str]) -> int:
    config = _prepare_config(args, overrides)
    run_dir = make_run_dir(args.out, "train")
    result = train_run(config, run_dir)
    render_training_curves(result.log_path, run_dir / "curves.png")
    report = result.report
    print(f"run directory: {run_dir}")
    print(f"trainable params: {result.trainable_params} / total {result.total_params}")
    print(f"final test: OA {report.oa:.4f}  mF1 {report.mf1:.4f}  mIoU {report.miou:.4f}")
    return 0


def cmd_eval(args, overrides: list[str]) -> int:
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    model, config, seed = load_checkpoint(Path(args.checkpoint))
    config = apply_overrides(config, overrides)
    validate_config(config)
    tiles = load_split(config, seed, "test")
    report = evaluate(model, tiles, config, mode=args.mode)
    payload = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    if args.out:
        run_dir = make_run_dir(args.out, f"eval-{args.mode}")
        (run_dir / "eval.json").write_text(payload)
        print(f"run directory: {run_dir}")
    print(payload)
    return 0


def cmd_ablate(args, overrides: list[str]) -> int:
    config = _prepare_config(args, overrides)
    run_dir = make_run_dir(args.out, "ablate")
    rows = []
    for name, use_cpia, use_dgfm, use_mcrm in ABLATION_VARIANTS:
        variant = _variant_config(config, use_cpia, use_dgfm, use_mcrm)
        result = train_run(variant, run_dir / name)
        rows.append(
            [
                name,
                f"{result.trainable_params / 1e6:.6f}",
                f"{result.report.oa:.6f}",
                f"{result.report.mf1:.6f}",
                f"{result.report.miou:.6f}",
            ]
        )
    header = ["variant", "params_m", "oa", "mf1", "miou"]
    write_table(run_dir / "ablation.csv", header, rows)
    render_ablation_figure(rows, run_dir / "ablation.png")
    print(f"run directory: {run_dir}")
    print(format_table(header, rows))
    return 0


def _robustness_eval_rows(model, config, seed, label: str) -> list[list]:
    tiles = load_split(config, seed, "test")
    full = evaluate(model, tiles, config, mode="full")
    degraded = evaluate(model, tiles, config, mode="rgb_only")
    return [
        [label, seed, "full", f"{full.oa:.6f}", f"{full.mf1:.6f}", f"{full.miou:.6f}"],
        [
            label,
            seed,
            "rgb_only",
            f"{degraded.oa:.6f}",
            f"{degraded.mf1:.6f}",
            f"{degraded.miou:.6f}",
        ],
        [
            label,
            seed,
            "drop",
            f"{full.oa - degraded.oa:.6f}",
            f"{full.mf1 - degraded.mf1:.6f}",
            f"{full.miou - degraded.miou:.6f}",
        ],
    ]


def cmd_robustness(args, overrides: list[str]) -> int:
    header = ["model", "seed", "mode", "oa", "mf1", "miou"]
    if args.checkpoint:
        model, config, seed = load_checkpoint(Path(args.checkpoint))
        config = apply_overrides(config, overrides)
        validate_config(config)
        run_dir = make_run_dir(args.out, "robustness")
        rows = _robustness_eval_rows(model, config, seed, "checkpoint")
        tiles = load_split(config, seed, "test")
        aux_only = evaluate(model, tiles, config, mode="aux_only")
        rows.append(
            [
                "checkpoint",
                seed,
                "aux_only",
                f"{aux_only.oa:.6f}",
                f"{aux_only.mf1:.6f}",
                f"{aux_only.miou:.6f}",
            ]
        )
    elif args.paired:
        config = _prepare_config(args, overrides)
        run_dir = make_run_dir(args.out, "robustness")
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [
            config["seed"] + i for i in range(3)
        ]
        rows = []
        wins = 0
        for seed in seeds:
            drops = {}
            for label, use_mcrm in (("masked", True), ("reference", False)):
                variant = _variant_config(
                    config, config["cpia"]["enabled"], config["dgfm"]["enabled"], use_mcrm
                )
                variant["seed"] = seed
                result = train_run(variant, run_dir / f"{label}-s{seed}")
                model, cfg, _ = load_checkpoint(result.checkpoint_path)
                model_rows = _robustness_eval_rows(model, cfg, seed, label)
                rows.extend(model_rows)
                drops[label] = float(model_rows[-1][5])
            if drops["masked"] < drops["reference"]:
                wins += 1
        print(
            f"masked training shows the smaller rgb_only mIoU drop in {wins}/{len(seeds)} seeds"
        )
    else:
        raise ConfigError("robustness requires --checkpoint or --paired")
    write_table(run_dir / "robustness.csv", header, rows)
    render_robustness_figure(rows, run_dir / "robustness.png")
    print(f"run directory: {run_dir}")
    print(format_table(header, rows))
    return 0


def cmd_params(args, overrides: list[str]) -> int:
    config = _prepare_config(args, overrides)
    model = build_model(config)
    frozen, trainable = partition_parameters(model)
    groups = model.parameter_groups()
    rows = []
    for name, params in groups.items():
        if not params:
            continue
        n = count_params(params)
        kind = "frozen" if any(p is q for _, p in params for _, q in frozen) else "trainable"
        rows.append([name, kind, n, f"{n / 1e6:.6f}"])
    n_frozen = count_params(frozen)
    n_train = count_params(trainable)
    total = n_frozen + n_train
    rows.append(["total_frozen", "frozen", n_frozen, f"{n_frozen / 1e6:.6f}"])
    rows.append(["total_trainable", "trainable", n_train, f"{n_train / 1e6:.6f}"])
    rows.append(["total", "-", total, f"{total / 1e6:.6f}"])
    header = ["group", "kind", "params", "params_m"]
    print(format_table(header, rows))
    print(f"trainable fraction: {n_train / total:.4f}")
    if args.out:
        run_dir = make_run_dir(args.out, "params")
        payload = {
            "groups": {name: count_params(params) for name, params in groups.items() if params},
            "frozen": n_frozen,
            "trainable": n_train,
            "total": total,
        }
        (run_dir / "params.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        print(f"run directory: {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualseg",
        description="Parameter-efficient dual-stream segmentation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (default 42)")
        p.add_argument("--out", default=None, help="parent directory for the run directory")

    p_train = sub.add_parser("train", help="train a model and write run artifacts")
    add_common(p_train)
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint file to evaluate")
    p_eval.add_argument("--mode", choices=EVAL_MODES, default="full")
    p_ablate = sub.add_parser("ablate", help="train the four component variants")
    add_common(p_ablate)
    p_rob = sub.add_parser("robustness", help="modality-missing evaluation")
    add_common(p_rob)
    p_rob.add_argument("--checkpoint", default=None, help="evaluate this checkpoint")
    p_rob.add_argument("--paired", action="store_true", help="train masked/reference twins")
    p_rob.add_argument("--seeds", default=None, help="comma-separated seeds for --paired")
    p_params = sub.add_parser("params", help="report parameter counts without training")
    add_common(p_params)
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "params": cmd_params,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = []
    for item in extra:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
            overrides.append(item[2:])
        else:
            print(f"error: unrecognized argument {item!r}", file=sys.stderr)
            return 2
    try:
        return COMMANDS[args.command](args, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps failures to exit codes
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
