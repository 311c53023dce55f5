"""Cross-modal prompt adapters inserted before each encoder stage.

Each stage owns one shared prompt generator, one per-modality channel
affine, and two residual bottleneck adapters (one per stream). The prompt
generated from both streams enters each bottleneck as an additive bias,
so a perturbation of either modality reaches the other stream's output.

At construction the whole stage is an exact identity: the affine
parameters and the adapter up-projections start at zero.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import TokenGrid


def seeded_dropout(
    x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None
) -> torch.Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or p <= 0.0:
        return x
    keep = 1.0 - p
    mask = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) < keep
    return x * mask.to(x.dtype) / keep


class PromptGenerator(nn.Module):
    """Projects both streams down, fuses them, and lifts back to a shared base."""

    def __init__(self, embed_dim: int, prompt_ratio: float):
        super().__init__()
        prompt_dim = max(1, int(prompt_ratio * embed_dim))
        self.prompt_dim = prompt_dim
        self.down_rgb = nn.Linear(embed_dim, prompt_dim, bias=False)
        self.down_aux = nn.Linear(embed_dim, prompt_dim, bias=False)
        self.fuse = nn.Linear(2 * prompt_dim, prompt_dim)
        self.up = nn.Linear(prompt_dim, embed_dim)
        nn.init.zeros_(self.fuse.bias)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise ValueError(f"stream shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
        joint = torch.cat([self.down_rgb(x), self.down_aux(y)], dim=-1)
        return self.up(self.fuse(joint))


class ModalityAffine(nn.Module):
    """Channel-wise residual affine: base + (base * gamma + beta), per modality."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.gamma = nn.ParameterDict(
            {m: nn.Parameter(torch.zeros(embed_dim)) for m in ("rgb", "aux")}
        )
        self.beta = nn.ParameterDict(
            {m: nn.Parameter(torch.zeros(embed_dim)) for m in ("rgb", "aux")}
        )

    def forward(self, base: torch.Tensor, modality: str) -> torch.Tensor:
        return base + (base * self.gamma[modality] + self.beta[modality])


class PromptedAdapter(nn.Module):
    """Residual bottleneck whose hidden state is biased by an injected prompt.

    out = tokens + up(relu(down(tokens) + prompt_proj(prompt))), with
    dropout on the bottleneck activation during training only. ``up``
    starts at zero so the adapter begins as an identity.
    """

    def __init__(self, embed_dim: int, bottleneck_ratio: float, dropout: float):
        super().__init__()
        hidden = max(1, int(bottleneck_ratio * embed_dim))
        self.hidden_dim = hidden
        self.dropout = dropout
        self.down = nn.Linear(embed_dim, hidden, bias=False)
        self.prompt_proj = nn.Linear(embed_dim, hidden, bias=False)
        self.up = nn.Linear(hidden, embed_dim, bias=False)
        nn.init.normal_(self.down.weight, std=0.02)
        nn.init.normal_(self.prompt_proj.weight, std=0.02)
        nn.init.zeros_(self.up.weight)

    def forward(
        self,
        tokens: torch.Tensor,
        prompt: torch.Tensor,
        training: bool = False,
        rng: torch.Generator | None = None,
    ) -> torch.Tensor:
        if tokens.shape != prompt.shape:
            raise ValueError(
                f"tokens {tuple(tokens.shape)} and prompt {tuple(prompt.shape)} differ"
            )
        hidden = F.relu(self.down(tokens) + self.prompt_proj(prompt))
        hidden = seeded_dropout(hidden, self.dropout, training, rng)
        return tokens + self.up(hidden)


class CrossModalStageAdapter(nn.Module):
    """One stage's worth of cross-modal modulation applied to both streams."""

    def __init__(
        self,
        embed_dim: int,
        prompt_ratio: float = 0.25,
        bottleneck_ratio: float = 0.25,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.generator = PromptGenerator(embed_dim, prompt_ratio)
        self.affine = ModalityAffine(embed_dim)
        self.adapter_rgb = PromptedAdapter(embed_dim, bottleneck_ratio, dropout)
        self.adapter_aux = PromptedAdapter(embed_dim, bottleneck_ratio, dropout)

    def forward(
        self,
        x: TokenGrid,
        y: TokenGrid,
        training: bool = False,
        rng: torch.Generator | None = None,
    ) -> tuple[TokenGrid, TokenGrid]:
        base = self.generator(x.data, y.data)
        prompt_rgb = self.affine(base, "rgb")
        prompt_aux = self.affine(base, "aux")
        out_x = self.adapter_rgb(x.data, prompt_rgb, training, rng)
        out_y = self.adapter_aux(y.data, prompt_aux, training, rng)
        return TokenGrid(out_x, x.modality), TokenGrid(out_y, y.modality)
