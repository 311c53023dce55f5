"""Frozen dual-stream transformer trunk.

Two modality streams (optical and auxiliary) share one stack of frozen
pre-LN transformer blocks and one frozen positional table. Only the
auxiliary patch embedding is trainable; the optical embedding, the
positional table and every block are frozen at construction time and are
expected to stay bit-identical for the lifetime of the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LAYERNORM_EPS = 1e-6


@dataclass
class TokenGrid:
    """A batch of tokens laid out on the 2-D patch grid, shape [B, H', W', C]."""

    data: torch.Tensor
    modality: str  # "rgb" | "aux"

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass
class EncoderSpec:
    """Architecture of the trunk: depth, width, patching and stage taps.

    ``tap_indices`` are 1-based block indices at which stage features are
    extracted; they must be strictly increasing and end at ``depth``.
    """

    depth: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    patch_size: int = 8
    tap_indices: tuple[int, ...] = (2, 4, 6, 8)
    aux_channels: int = 1
    rgb_channels: int = 3
    mlp_ratio: float = 4.0
    native_grid: tuple[int, int] = (8, 8)

    def __post_init__(self) -> None:
        self.tap_indices = tuple(int(t) for t in self.tap_indices)
        if self.depth < 1 or self.embed_dim < 1 or self.num_heads < 1 or self.patch_size < 1:
            raise ValueError("depth, embed_dim, num_heads and patch_size must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        partition_stages(self)  # validates tap indices

    @property
    def num_stages(self) -> int:
        return len(self.tap_indices)


def partition_stages(spec: EncoderSpec) -> list[tuple[int, int]]:
    """Split blocks 1..depth into stage ranges ending at each tap index.

    Returns inclusive 1-based (first, last) ranges; they are disjoint and
    cover [1, depth] exactly.
    """
    taps = spec.tap_indices
    if len(taps) == 0:
        raise ValueError("tap_indices must not be empty")
    prev = 0
    ranges = []
    for t in taps:
        if t <= prev:
            raise ValueError(f"tap_indices must be strictly increasing, got {taps}")
        ranges.append((prev + 1, t))
        prev = t
    if prev != spec.depth:
        raise ValueError(f"last tap index {prev} must equal depth {spec.depth}")
    return ranges


def resample_pos_table(pos: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """Resize a positional table [H0, W0, C] to [grid_h, grid_w, C].

    Bicubic with half-pixel centers; a no-op when the sizes already match.
    """
    h0, w0, _ = pos.shape
    if (h0, w0) == (grid_h, grid_w):
        return pos
    maps = pos.permute(2, 0, 1).unsqueeze(0)  # [1, C, H0, W0]
    maps = F.interpolate(maps, size=(grid_h, grid_w), mode="bicubic", align_corners=False)
    return maps.squeeze(0).permute(1, 2, 0)


class PatchEmbed(nn.Module):
    """Non-overlapping p x p patch projection to the token dimension."""

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int):
        super().__init__()
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        b, c, h, w = image.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        p = self.patch_size
        if h % p != 0:
            raise ValueError(f"height {h} not divisible by patch size {p}")
        if w % p != 0:
            raise ValueError(f"width {w} not divisible by patch size {p}")
        tokens = self.proj(image)  # [B, C, H', W']
        return tokens.permute(0, 2, 3, 1).contiguous()


class TransformerBlock(nn.Module):
    """Pre-LN block: x += SA(LN(x)); x += MLP(LN(x)). Attention spans the full grid."""

    def __init__(self, embed_dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        hidden = int(embed_dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(embed_dim, eps=LAYERNORM_EPS)
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.proj = nn.Linear(embed_dim, embed_dim)
        self.norm2 = nn.LayerNorm(embed_dim, eps=LAYERNORM_EPS)
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, embed_dim)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each [B, heads, N, dh]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        b, gh, gw, c = grid.shape
        x = grid.reshape(b, gh * gw, c)
        x = x + self.attention(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x.reshape(b, gh, gw, c)


class DualStreamEncoder(nn.Module):
    """Shared-weight two-stream encoder with asymmetric patch embeddings.

    The optical embedding, positional table and all blocks are frozen;
    the auxiliary embedding is the only trainable piece here.
    """

    def __init__(self, spec: EncoderSpec, init_seed: int = 42):
        super().__init__()
        self.spec = spec
        self.stage_ranges = partition_stages(spec)
        self.rgb_embed = PatchEmbed(spec.rgb_channels, spec.embed_dim, spec.patch_size)
        self.aux_embed = PatchEmbed(spec.aux_channels, spec.embed_dim, spec.patch_size)
        self.pos_table = nn.Parameter(
            torch.zeros(spec.native_grid[0], spec.native_grid[1], spec.embed_dim)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.embed_dim, spec.num_heads, spec.mlp_ratio)
            for _ in range(spec.depth)
        )
        self._init_weights(init_seed)
        self._freeze()

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.dim() > 1:
                torch.nn.init.normal_(p, mean=0.0, std=0.02, generator=gen)
            elif "norm" in name and name.endswith("weight"):
                torch.nn.init.ones_(p)
            else:
                torch.nn.init.zeros_(p)

    def _freeze(self) -> None:
        for p in self.frozen_parameters().values():
            p.requires_grad_(False)

    def frozen_parameters(self) -> dict[str, torch.Tensor]:
        """Canonical name -> tensor map of everything that must never train."""
        out = {"pos_table": self.pos_table}
        out.update({f"rgb_embed.{k}": v for k, v in self.rgb_embed.named_parameters()})
        out.update({f"blocks.{k}": v for k, v in self.blocks.named_parameters()})
        return out

    def embed_rgb(self, image: torch.Tensor) -> TokenGrid:
        tokens = self.rgb_embed(image)
        return self.add_positional(TokenGrid(tokens, "rgb"))

    def embed_aux(self, image: torch.Tensor) -> TokenGrid:
        tokens = self.aux_embed(image)
        return self.add_positional(TokenGrid(tokens, "aux"))

    def add_positional(self, tokens: TokenGrid) -> TokenGrid:
        gh, gw = tokens.grid_size
        pos = resample_pos_table(self.pos_table.to(tokens.data.dtype), gh, gw)
        return TokenGrid(tokens.data + pos.unsqueeze(0), tokens.modality)

    def run_block(self, tokens: TokenGrid, block_index: int) -> TokenGrid:
        """Apply block ``block_index`` (1-based) to one stream."""
        if not 1 <= block_index <= self.spec.depth:
            raise ValueError(f"block index {block_index} outside [1, {self.spec.depth}]")
        return TokenGrid(self.blocks[block_index - 1](tokens.data), tokens.modality)

    def run_stage(self, stage: int, x: TokenGrid, y: TokenGrid) -> tuple[TokenGrid, TokenGrid]:
        """Push both streams through the blocks of stage ``stage`` (0-based)."""
        first, last = self.stage_ranges[stage]
        for b in range(first, last + 1):
            x = self.run_block(x, b)
            y = self.run_block(y, b)
        return x, y


def snapshot_frozen(encoder: DualStreamEncoder) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in encoder.frozen_parameters().items()}


def frozen_drift(encoder: DualStreamEncoder, snapshot: dict[str, torch.Tensor]) -> list[str]:
    """Names of frozen tensors that changed (bitwise) since ``snapshot``."""
    drifted = []
    for name, tensor in encoder.frozen_parameters().items():
        if not torch.equal(tensor.detach(), snapshot[name]):
            drifted.append(name)
    return drifted


def export_trunk_weights(encoder: DualStreamEncoder, path: str) -> None:
    """Write the frozen tensors as a flat npz archive of little-endian float32."""
    arrays = {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in encoder.frozen_parameters().items()
    }
    np.savez(path, **arrays)


def load_trunk_weights(encoder: DualStreamEncoder, path: str) -> None:
    """Load frozen tensors from an archive written by :func:`export_trunk_weights`.

    Every frozen tensor must be present with a matching shape.
    """
    with np.load(path) as archive:
        frozen = encoder.frozen_parameters()
        missing = sorted(set(frozen) - set(archive.files))
        if missing:
            raise ValueError(f"weight archive missing entries: {missing}")
        with torch.no_grad():
            for name, tensor in frozen.items():
                arr = archive[name].astype("<f4")
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise ValueError(
                        f"shape mismatch for {name}: archive {arr.shape} vs model {tuple(tensor.shape)}"
                    )
                tensor.copy_(torch.from_numpy(arr.copy()).to(tensor.dtype))
