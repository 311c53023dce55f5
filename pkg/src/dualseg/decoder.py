"""Multi-level decoder over the fused stage features.

A reduced feature-pyramid head: per-stage 1x1 laterals into a common
width, pyramid pooling enriching the deepest level, top-down addition,
a merge convolution over the concatenated levels, a 1x1 classifier and
a bilinear upsample to the input resolution. With a single stage and no
pooling bins it degenerates to lateral -> classifier -> upsample.

The two auxiliary heads classify the final-stage unimodal features and
exist only for masked training; calling one outside training mode is a
contract violation.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import StageBundle, tokens_to_map


def _resize(feat: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if feat.shape[-2:] == size:
        return feat
    return F.interpolate(feat, size=size, mode="bilinear", align_corners=False)


class PyramidPooling(nn.Module):
    """Adaptive-average context branches concatenated onto the deepest level."""

    def __init__(self, channels: int, bins: tuple[int, ...]):
        super().__init__()
        self.bins = bins
        self.branches = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in bins)
        self.project = nn.Conv2d(channels * (1 + len(bins)), channels, 1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        size = feat.shape[-2:]
        pieces = [feat]
        for bin_size, branch in zip(self.bins, self.branches):
            pooled = F.adaptive_avg_pool2d(feat, bin_size)
            pieces.append(_resize(branch(pooled), size))
        return self.project(torch.cat(pieces, dim=1))


class FusedDecoder(nn.Module):
    """Turn the list of fused stage maps into full-resolution class logits."""

    def __init__(
        self,
        stage_channels: list[int],
        num_classes: int,
        decoder_channels: int = 64,
        ppm_bins: tuple[int, ...] = (1, 2, 4),
    ):
        super().__init__()
        self.num_stages = len(stage_channels)
        self.num_classes = num_classes
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, decoder_channels, 1) for c in stage_channels
        )
        self.ppm = PyramidPooling(decoder_channels, ppm_bins) if ppm_bins else None
        self.merge = (
            nn.Conv2d(self.num_stages * decoder_channels, decoder_channels, 3, padding=1)
            if self.num_stages > 1
            else None
        )
        self.classifier = nn.Conv2d(decoder_channels, num_classes, 1)

    def forward(self, stages: list[StageBundle], out_size: tuple[int, int]) -> torch.Tensor:
        if len(stages) != self.num_stages:
            raise ValueError(f"expected {self.num_stages} stage bundles, got {len(stages)}")
        maps = []
        for bundle, lateral in zip(stages, self.laterals):
            gh, gw = bundle.grid_size
            maps.append(lateral(tokens_to_map(bundle.fused, gh, gw)))
        if self.ppm is not None:
            maps[-1] = self.ppm(maps[-1])
        for s in range(self.num_stages - 2, -1, -1):  # top-down pathway
            maps[s] = maps[s] + _resize(maps[s + 1], maps[s].shape[-2:])
        if self.merge is not None:
            ref = maps[0].shape[-2:]
            merged = self.merge(torch.cat([_resize(m, ref) for m in maps], dim=1))
        else:
            merged = maps[0]
        logits = self.classifier(merged)
        return _resize(logits, out_size)


class AuxHead(nn.Module):
    """Lightweight unimodal classifier used only under masked training."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, feat: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        if not self.training:
            raise RuntimeError("auxiliary heads are training-only; detach them for inference")
        return _resize(self.classifier(feat), out_size)
