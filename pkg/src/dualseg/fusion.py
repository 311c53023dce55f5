"""Difference-gated fusion of paired stage features.

After each encoder stage the two modality grids are reduced to a compact
channel space, their absolute difference is taken as a disagreement cue,
and a small gate network turns [reduced_x; reduced_y; |diff|] into a
per-channel, per-position gate in (0, 1). The fused map is the convex
combination gate * x + (1 - gate) * y, so every fused entry stays inside
the elementwise envelope of the two inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import TokenGrid


@dataclass
class StageBundle:
    """Per-stage decoder inputs: both unimodal maps, fused tokens, and the gate."""

    x_feat: torch.Tensor  # [B, C, H, W]
    y_feat: torch.Tensor  # [B, C, H, W]
    fused: torch.Tensor  # [B, H*W, C] token layout
    gate: torch.Tensor  # [B, C, H, W], entries strictly in (0, 1)

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.x_feat.shape[2], self.x_feat.shape[3]


def tokens_to_map(tokens: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """[B, H*W, C] row-major tokens -> [B, C, H, W] map."""
    b, n, c = tokens.shape
    if n != grid_h * grid_w:
        raise ValueError(f"{n} tokens do not tile a {grid_h}x{grid_w} grid")
    return tokens.reshape(b, grid_h, grid_w, c).permute(0, 3, 1, 2).contiguous()


def map_to_tokens(feat: torch.Tensor) -> torch.Tensor:
    """[B, C, H, W] map -> [B, H*W, C] row-major tokens. Inverse of tokens_to_map."""
    b, c, h, w = feat.shape
    return feat.permute(0, 2, 3, 1).reshape(b, h * w, c)


def group_count(channels: int, requested: int = 8) -> int:
    """Largest usable group count: min(requested, channels), falling back to 1."""
    g = min(requested, channels)
    return g if channels % g == 0 else 1


class DifferenceGatedFusion(nn.Module):
    """Gate-weighted convex fusion of two same-shape feature maps."""

    def __init__(self, channels: int, reduction: int = 4, groups: int = 8):
        super().__init__()
        reduced = max(1, channels // reduction)
        if reduced >= channels and channels > 1:
            reduced = channels - 1
        self.channels = channels
        self.reduced = reduced
        self.reduce_x = nn.Conv2d(channels, reduced, kernel_size=1)
        self.reduce_y = nn.Conv2d(channels, reduced, kernel_size=1)
        self.gate_net = nn.Sequential(
            nn.Conv2d(3 * reduced, reduced, kernel_size=1),
            nn.GroupNorm(group_count(reduced, groups), reduced),
            nn.GELU(),
            nn.Conv2d(reduced, channels, kernel_size=1),
        )

    def reduce(self, feat: torch.Tensor, which: str) -> torch.Tensor:
        if feat.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {feat.shape[1]}")
        return self.reduce_x(feat) if which == "rgb" else self.reduce_y(feat)

    @staticmethod
    def discrepancy(rx: torch.Tensor, ry: torch.Tensor) -> torch.Tensor:
        if rx.shape != ry.shape:
            raise ValueError(f"reduced shapes differ: {tuple(rx.shape)} vs {tuple(ry.shape)}")
        return (rx - ry).abs()

    def gate(self, rx: torch.Tensor, ry: torch.Tensor, diff: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate_net(torch.cat([rx, ry, diff], dim=1)))

    def forward(self, x: TokenGrid, y: TokenGrid) -> StageBundle:
        gh, gw = x.grid_size
        x_map = tokens_to_map(x.data.reshape(x.data.shape[0], gh * gw, -1), gh, gw)
        y_map = tokens_to_map(y.data.reshape(y.data.shape[0], gh * gw, -1), gh, gw)
        rx = self.reduce(x_map, "rgb")
        ry = self.reduce(y_map, "aux")
        gate = self.gate(rx, ry, self.discrepancy(rx, ry))
        fused_map = gate * x_map + (1.0 - gate) * y_map
        return StageBundle(x_map, y_map, map_to_tokens(fused_map), gate)


class MeanFusion(nn.Module):
    """Parameter-free fallback: plain average of the two streams.

    Used by configurations that disable the gated module so the decoder
    contract (one fused token map per stage) is unchanged.
    """

    def forward(self, x: TokenGrid, y: TokenGrid) -> StageBundle:
        gh, gw = x.grid_size
        x_map = tokens_to_map(x.data.reshape(x.data.shape[0], gh * gw, -1), gh, gw)
        y_map = tokens_to_map(y.data.reshape(y.data.shape[0], gh * gw, -1), gh, gw)
        fused_map = 0.5 * (x_map + y_map)
        gate = torch.full_like(x_map, 0.5)
        return StageBundle(x_map, y_map, map_to_tokens(fused_map), gate)
