"""Freeze-aware training loop, evaluation protocol and checkpointing.

The optimizer only ever sees the trainable partition, so frozen tensors
cannot drift and carry no optimizer state. All randomness (batch order,
crops, masking, dropout) flows from per-purpose streams derived from the
run seed, which makes single-worker runs bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

from .config import ConfigError, snapshot_yaml, validate_config
from .data import (
    SyntheticSpec,
    TilePair,
    load_dataset,
    normalize_pair,
    random_crop_flip,
    sliding_window_inference,
    synth_dataset,
)
from .losses import total_loss
from .masking import MaskGeometry, MaskPlan, apply_masking, plan_masking, validate_geometry
from .metrics import ConfusionMatrix, MetricsReport
from .model import MultimodalSegmenter, build_model


class TrainingAborted(RuntimeError):
    """Raised when the loss turns non-finite; a diagnostic snapshot is written."""


@dataclass
class FreezePolicy:
    frozen_groups: tuple[str, ...] = ("backbone_blocks", "rgb_patch_embed", "positional_encoding")
    trainable_groups: tuple[str, ...] = (
        "aux_patch_embed",
        "adapters",
        "fusion",
        "decoder",
        "aux_heads",
    )


@dataclass
class ScheduleSpec:
    base_lr: float = 3.0e-4
    lr_min: float = 0.0
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 8

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "ScheduleSpec":
        s = config["schedule"]
        return cls(
            base_lr=s["base_lr"],
            lr_min=s["lr_min"],
            weight_decay=s["weight_decay"],
            warmup_epochs=s["warmup_epochs"],
            epochs=s["epochs"],
            steps_per_epoch=s["steps_per_epoch"],
            batch_size=s["batch_size"],
        )


def lr_at(step: int, spec: ScheduleSpec) -> float:
    """Linear 0 -> base_lr over warmup, cosine base_lr -> lr_min afterwards.

    The cosine phase spans [warmup_steps, total_steps - 1] so the last
    training step lands exactly on lr_min.
    """
    warmup = spec.warmup_steps
    last = spec.total_steps - 1
    if warmup > 0 and step < warmup:
        return spec.base_lr * step / warmup
    if last <= warmup:
        return spec.base_lr if step <= warmup else spec.lr_min
    t = (step - warmup) / (last - warmup)
    t = min(max(t, 0.0), 1.0)
    return spec.lr_min + 0.5 * (spec.base_lr - spec.lr_min) * (1.0 + math.cos(math.pi * t))


def partition_parameters(
    model: MultimodalSegmenter, policy: FreezePolicy | None = None
) -> tuple[list[tuple[str, torch.nn.Parameter]], list[tuple[str, torch.nn.Parameter]]]:
    """Split parameters into (frozen, trainable); the split must be a partition."""
    policy = policy or FreezePolicy()
    groups = model.parameter_groups()
    known = set(policy.frozen_groups) | set(policy.trainable_groups)
    if set(groups) - known:
        raise ValueError(f"freeze policy does not cover groups: {sorted(set(groups) - known)}")
    if set(policy.frozen_groups) & set(policy.trainable_groups):
        raise ValueError("freeze policy groups overlap")
    frozen = [item for g in policy.frozen_groups for item in groups.get(g, [])]
    trainable = [item for g in policy.trainable_groups for item in groups.get(g, [])]
    if len(frozen) + len(trainable) != sum(len(v) for v in groups.values()):
        raise ValueError("freeze policy does not partition the parameter set")
    return frozen, trainable


def count_params(params: Iterable) -> int:
    total = 0
    for item in params:
        p = item[1] if isinstance(item, tuple) else item
        total += p.numel()
    return total


# -- data plumbing -------------------------------------------------------------


def _synthetic_split(config: dict[str, Any], seed: int, split: str) -> list[TilePair]:
    syn = config["data"]["synthetic"]
    spec = SyntheticSpec(
        tiles=syn["tiles_train"] if split == "train" else syn["tiles_test"],
        tile_size=syn["tile_size"],
        classes=config["model"]["num_classes"],
        mode=syn["mode"],
        region_cells=syn["region_cells"],
        rgb_noise=syn["rgb_noise"],
        dsm_noise=syn["dsm_noise"],
    )
    offset = 0 if split == "train" else 1
    return synth_dataset(spec, seed=int(np.random.SeedSequence([seed, offset]).generate_state(1)[0]))


def load_split(config: dict[str, Any], seed: int, split: str) -> list[TilePair]:
    root = config["data"]["root"]
    if root is None:
        return _synthetic_split(config, seed, split)
    try:
        return load_dataset(Path(root), split)
    except FileNotFoundError as exc:
        raise ConfigError(f"data.root: {exc}") from exc


def sample_batch(
    tiles: list[TilePair], crop: int, batch_size: int, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Random tiles, random aligned crops and flips; tensors [B, C, h, w]."""
    rgbs, auxs, labels = [], [], []
    for _ in range(batch_size):
        pair = tiles[int(rng.integers(0, len(tiles)))]
        patch = random_crop_flip(pair, crop, rng)
        rgbs.append(torch.from_numpy(patch.rgb))
        auxs.append(torch.from_numpy(patch.aux))
        labels.append(torch.from_numpy(patch.labels))
    return torch.stack(rgbs), torch.stack(auxs), torch.stack(labels)


def corrupt_batch(
    rgb: torch.Tensor,
    aux: torch.Tensor,
    plan: MaskPlan | None,
    training: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply a mask plan; outside training a plan is a contract violation."""
    if plan is None:
        return rgb, aux
    if not training:
        raise RuntimeError("mask plans are training-only; evaluation must not corrupt inputs")
    return apply_masking(rgb, aux, plan)


# -- evaluation ----------------------------------------------------------------

EVAL_MODES = ("full", "rgb_only", "aux_only")


def foreground_ids(config: dict[str, Any]) -> list[int]:
    k = config["model"]["num_classes"]
    background = config["model"]["background_id"]
    if background is None:
        background = k - 1
    return [c for c in range(k) if c != background]


def evaluate(
    model,
    tiles: list[TilePair],
    config: dict[str, Any],
    mode: str = "full",
) -> MetricsReport:
    """Sliding-window evaluation; degraded modes zero one normalized modality."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")
    if isinstance(model, torch.nn.Module):
        model.eval()
    family = config["backbone"]["family"]
    cm = ConfusionMatrix(config["model"]["num_classes"], foreground_ids(config))
    ignore = config["loss"]["ignore_index"]
    crop = config["eval"]["crop"]
    stride = config["eval"]["stride"]
    for pair in tiles:
        norm = normalize_pair(pair, family)
        rgb = torch.from_numpy(norm.rgb)
        aux = torch.from_numpy(norm.dsm)
        if mode == "rgb_only":
            aux = torch.zeros_like(aux)
        elif mode == "aux_only":
            rgb = torch.zeros_like(rgb)
        logits = sliding_window_inference(model, rgb, aux, crop, stride)
        pred = logits.argmax(dim=0).numpy()
        cm.accumulate(pred, pair.labels, ignore_index=ignore)
    return cm.report()


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: Path, model: MultimodalSegmenter, config: dict[str, Any], seed: int) -> None:
    """Store only the trainable tensors; frozen weights come back from the seed."""
    trainable = {
        name: p.detach().cpu().clone() for name, p in model.named_parameters() if p.requires_grad
    }
    torch.save({"trainable": trainable, "config": config, "seed": seed}, path)


def load_checkpoint(path: Path) -> tuple[MultimodalSegmenter, dict[str, Any], int]:
    blob = torch.load(path, weights_only=True)
    config, seed = blob["config"], blob["seed"]
    model = build_model(config, seed)
    stored = blob["trainable"]
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.requires_grad:
                if name not in stored:
                    raise ValueError(f"checkpoint missing trainable tensor {name}")
                p.copy_(stored[name])
    return model, config, seed


# -- the run -------------------------------------------------------------------


@dataclass
class TrainResult:
    run_dir: Path
    report: MetricsReport
    trainable_params: int
    total_params: int
    log_path: Path
    checkpoint_path: Path
    metrics_path: Path
    model: MultimodalSegmenter


class RecordWriter:
    """Line-delimited JSON run log."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w")

    def write(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def train_run(config: dict[str, Any], run_dir: Path, seed: int | None = None) -> TrainResult:
    """Train per config into ``run_dir``; returns the final test report."""
    validate_config(config)
    seed = config["seed"] if seed is None else seed
    config = {**config, "seed": seed}
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(snapshot_yaml(config))

    schedule = ScheduleSpec.from_config(config)
    crop = config["data"]["crop"]
    mcrm_cfg = config["mcrm"]
    geometry = None
    if mcrm_cfg["enabled"]:
        geometry = MaskGeometry(
            regions=mcrm_cfg["regions"],
            area_min=mcrm_cfg["area_min"],
            area_max=mcrm_cfg["area_max"],
            aspect_min=mcrm_cfg["aspect_min"],
            aspect_max=mcrm_cfg["aspect_max"],
        )
        try:
            validate_geometry(crop, crop, geometry)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    train_tiles = load_split(config, seed, "train")
    test_tiles = load_split(config, seed, "test")
    family = config["backbone"]["family"]
    train_norm = [normalize_pair(p, family) for p in train_tiles]

    model = build_model(config, seed)
    seeds = np.random.SeedSequence([seed, 2]).generate_state(3)
    batch_rng = np.random.default_rng(int(seeds[0]))
    mask_rng = np.random.default_rng(int(seeds[1]))
    model.seed_dropout(int(seeds[2]))

    frozen, trainable = partition_parameters(model)
    optimizer = torch.optim.AdamW(
        [p for _, p in trainable], lr=schedule.base_lr, weight_decay=schedule.weight_decay
    )

    writer = RecordWriter(run_dir / "log.ndjson")
    writer.write(
        {
            "type": "run",
            "seed": seed,
            "trainable_params": count_params(trainable),
            "total_params": count_params(frozen) + count_params(trainable),
            "config": config,
        }
    )

    eval_every = config["schedule"]["eval_every"]
    lambda_aux = config["loss"]["lambda_aux"]
    ignore = config["loss"]["ignore_index"]
    step = 0
    final_report: MetricsReport | None = None
    try:
        for epoch in range(schedule.epochs):
            model.train()
            for _ in range(schedule.steps_per_epoch):
                rgb, aux, labels = sample_batch(train_norm, crop, schedule.batch_size, batch_rng)
                plan = None
                if geometry is not None:
                    plan = plan_masking(
                        schedule.batch_size, mcrm_cfg["ratio"], crop, crop, geometry, mask_rng
                    )
                rgb, aux = corrupt_batch(rgb, aux, plan, training=True)
                out = model.forward_train(rgb, aux)
                loss, breakdown = total_loss(
                    out.logits, out.logits_rgb, out.logits_aux, labels, lambda_aux, ignore
                )
                if not math.isfinite(breakdown.total):
                    diag = {"step": step, "epoch": epoch, **breakdown.as_dict()}
                    (run_dir / "abort.json").write_text(json.dumps(diag, indent=2))
                    raise TrainingAborted(f"non-finite loss at step {step}: {breakdown.total}")
                lr = lr_at(step, schedule)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                writer.write(
                    {
                        "type": "step",
                        "step": step,
                        "epoch": epoch,
                        "lr": lr,
                        "gate_means": out.gate_means,
                        **breakdown.as_dict(),
                    }
                )
                step += 1
            last_epoch = epoch == schedule.epochs - 1
            if last_epoch or (eval_every > 0 and (epoch + 1) % eval_every == 0):
                report = evaluate(model, test_tiles, config, mode="full")
                writer.write({"type": "eval", "epoch": epoch, **report.as_dict()})
                if last_epoch:
                    final_report = report
    finally:
        writer.close()

    if final_report is None:
        final_report = evaluate(model, test_tiles, config, mode="full")
    metrics_path = run_dir / "metrics.json"
    metrics_path.write_text(json.dumps(final_report.as_dict(), indent=2, sort_keys=True))
    checkpoint_path = run_dir / "checkpoint"
    save_checkpoint(checkpoint_path, model, config, seed)
    return TrainResult(
        run_dir=run_dir,
        report=final_report,
        trainable_params=count_params(trainable),
        total_params=count_params(frozen) + count_params(trainable),
        log_path=run_dir / "log.ndjson",
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        model=model,
    )
