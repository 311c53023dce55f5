"""Full segmenter: frozen trunk + stage adapters + gated fusion + decoder.

Construction is driven by the run config so ablation variants (adapters
off, gated fusion off, masked training off) are one-flag toggles. The
auxiliary heads exist only when masked training is enabled and never
participate in the inference path.
"""

from __future__ import annotations

from typing import Any, NamedTuple

import torch
import torch.nn as nn

from .adapters import CrossModalStageAdapter
from .backbone import DualStreamEncoder, EncoderSpec, load_trunk_weights
from .decoder import AuxHead, FusedDecoder
from .fusion import DifferenceGatedFusion, MeanFusion, StageBundle, tokens_to_map


class TrainOutput(NamedTuple):
    logits: torch.Tensor
    logits_rgb: torch.Tensor | None
    logits_aux: torch.Tensor | None
    gate_means: list[float]


class MultimodalSegmenter(nn.Module):
    def __init__(
        self,
        spec: EncoderSpec,
        num_classes: int,
        use_adapters: bool = True,
        prompt_ratio: float = 0.25,
        bottleneck_ratio: float = 0.25,
        adapter_dropout: float = 0.1,
        use_gated_fusion: bool = True,
        fusion_reduction: int = 4,
        fusion_groups: int = 8,
        use_aux_heads: bool = True,
        decoder_channels: int = 64,
        ppm_bins: tuple[int, ...] = (1, 2, 4),
        init_seed: int = 42,
    ):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.trunk = DualStreamEncoder(spec, init_seed=init_seed)
        stages = spec.num_stages
        dim = spec.embed_dim
        self.adapters = (
            nn.ModuleList(
                CrossModalStageAdapter(dim, prompt_ratio, bottleneck_ratio, adapter_dropout)
                for _ in range(stages)
            )
            if use_adapters
            else None
        )
        if use_gated_fusion:
            self.fusion = nn.ModuleList(
                DifferenceGatedFusion(dim, fusion_reduction, fusion_groups)
                for _ in range(stages)
            )
        else:
            self.fusion = nn.ModuleList(MeanFusion() for _ in range(stages))
        self.decoder = FusedDecoder([dim] * stages, num_classes, decoder_channels, ppm_bins)
        self.aux_heads = (
            nn.ModuleDict({"rgb": AuxHead(dim, num_classes), "aux": AuxHead(dim, num_classes)})
            if use_aux_heads
            else None
        )
        self.dropout_rng = torch.Generator()
        self.dropout_rng.manual_seed(init_seed)

    def seed_dropout(self, seed: int) -> None:
        self.dropout_rng.manual_seed(seed)

    def encode(self, rgb: torch.Tensor, aux: torch.Tensor):
        """Run both streams through all stages; returns bundles + final grids."""
        x = self.trunk.embed_rgb(rgb)
        y = self.trunk.embed_aux(aux)
        bundles: list[StageBundle] = []
        for s in range(self.spec.num_stages):
            if self.adapters is not None:
                x, y = self.adapters[s](x, y, training=self.training, rng=self.dropout_rng)
            x, y = self.trunk.run_stage(s, x, y)
            bundles.append(self.fusion[s](x, y))
        return bundles, x, y

    def forward(self, rgb: torch.Tensor, aux: torch.Tensor) -> torch.Tensor:
        """Fused logits at input resolution. The only path used at inference."""
        out_size = rgb.shape[-2:]
        bundles, _, _ = self.encode(rgb, aux)
        return self.decoder(bundles, out_size)

    def forward_train(self, rgb: torch.Tensor, aux: torch.Tensor) -> TrainOutput:
        """Fused plus per-modality auxiliary logits; training mode only."""
        if not self.training:
            raise RuntimeError("forward_train requires training mode")
        out_size = rgb.shape[-2:]
        bundles, x, y = self.encode(rgb, aux)
        logits = self.decoder(bundles, out_size)
        logits_rgb = logits_aux = None
        if self.aux_heads is not None:
            gh, gw = x.grid_size
            x_map = tokens_to_map(x.data.reshape(x.data.shape[0], gh * gw, -1), gh, gw)
            y_map = tokens_to_map(y.data.reshape(y.data.shape[0], gh * gw, -1), gh, gw)
            logits_rgb = self.aux_heads["rgb"](x_map, out_size)
            logits_aux = self.aux_heads["aux"](y_map, out_size)
        gate_means = [float(b.gate.detach().mean()) for b in bundles]
        return TrainOutput(logits, logits_rgb, logits_aux, gate_means)

    # -- parameter accounting -------------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters split into the freeze-policy groups."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "backbone_blocks": [],
            "rgb_patch_embed": [],
            "positional_encoding": [],
            "aux_patch_embed": [],
            "adapters": [],
            "fusion": [],
            "decoder": [],
            "aux_heads": [],
        }
        for name, p in self.named_parameters():
            if name.startswith("trunk.blocks."):
                groups["backbone_blocks"].append((name, p))
            elif name.startswith("trunk.rgb_embed."):
                groups["rgb_patch_embed"].append((name, p))
            elif name == "trunk.pos_table":
                groups["positional_encoding"].append((name, p))
            elif name.startswith("trunk.aux_embed."):
                groups["aux_patch_embed"].append((name, p))
            elif name.startswith("adapters."):
                groups["adapters"].append((name, p))
            elif name.startswith("fusion."):
                groups["fusion"].append((name, p))
            elif name.startswith("decoder."):
                groups["decoder"].append((name, p))
            elif name.startswith("aux_heads."):
                groups["aux_heads"].append((name, p))
            else:  # pragma: no cover - every parameter must be classified
                raise RuntimeError(f"parameter {name} not covered by the freeze policy")
        return groups

    def inference_parameter_count(self) -> int:
        """Parameters used at inference: everything except the auxiliary heads."""
        return sum(
            p.numel() for name, p in self.named_parameters() if not name.startswith("aux_heads.")
        )


def build_model(config: dict[str, Any], seed: int | None = None) -> MultimodalSegmenter:
    """Construct a segmenter from a materialized run config."""
    seed = config["seed"] if seed is None else seed
    bb = config["backbone"]
    crop = config["data"]["crop"]
    native = max(1, crop // bb["patch_size"])
    spec = EncoderSpec(
        depth=bb["depth"],
        embed_dim=bb["embed_dim"],
        num_heads=bb["num_heads"],
        patch_size=bb["patch_size"],
        tap_indices=tuple(bb["tap_indices"]),
        aux_channels=bb["aux_channels"],
        rgb_channels=bb["rgb_channels"],
        mlp_ratio=bb["mlp_ratio"],
        native_grid=(native, native),
    )
    torch.manual_seed(seed)  # trainable-module init draws from the global stream
    model = MultimodalSegmenter(
        spec,
        num_classes=config["model"]["num_classes"],
        use_adapters=config["cpia"]["enabled"],
        prompt_ratio=config["cpia"]["r_p"],
        bottleneck_ratio=config["cpia"]["r_a"],
        adapter_dropout=config["cpia"]["dropout"],
        use_gated_fusion=config["dgfm"]["enabled"],
        fusion_reduction=config["dgfm"]["reduction"],
        fusion_groups=config["dgfm"]["groups"],
        use_aux_heads=config["mcrm"]["enabled"],
        decoder_channels=config["decoder"]["channels"],
        ppm_bins=tuple(config["decoder"]["ppm_bins"]),
        init_seed=seed,
    )
    if bb["weight_file"]:
        load_trunk_weights(model.trunk, bb["weight_file"])
    return model
