"""Training-only modality-conditional masking.

For each batch a plan assigns floor(r*B) samples to masking, split nearly
evenly between the two modalities; every masked sample gets K random
rectangles zeroed on exactly one modality while the other stays intact.
Plans are produced from an explicit RNG stream owned by the training loop
so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
import torch

REGION_RESAMPLE_TRIES = 10


class MaskTarget(Enum):
    MASK_RGB = "mask_rgb"
    MASK_AUX = "mask_aux"
    FULL = "full"


class Rect(NamedTuple):
    top: int
    left: int
    height: int
    width: int


@dataclass
class MaskGeometry:
    """Sampling ranges for the rectangles: count, area fraction, aspect (h/w)."""

    regions: int = 3
    area_min: float = 0.02
    area_max: float = 0.15
    aspect_min: float = 0.5
    aspect_max: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.area_min <= self.area_max < 1.0:
            raise ValueError(f"need 0 < area_min <= area_max < 1, got [{self.area_min}, {self.area_max}]")
        if not self.aspect_min <= 1.0 <= self.aspect_max:
            raise ValueError(f"aspect range must bracket 1, got [{self.aspect_min}, {self.aspect_max}]")
        if self.regions < 1:
            raise ValueError("regions must be >= 1")


@dataclass
class MaskPlan:
    """Per-sample assignment plus the rectangles for each masked sample."""

    assignments: list[MaskTarget]
    regions: list[list[Rect]] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return len(self.assignments)

    def count(self, target: MaskTarget) -> int:
        return sum(1 for a in self.assignments if a is target)


def validate_geometry(image_h: int, image_w: int, geometry: MaskGeometry) -> None:
    """Reject geometries that cannot place even a minimum-area rectangle.

    The largest in-bounds area at aspect ratio a is min(a*W^2, H^2/a),
    maximized at a = H/W clamped into the allowed range.
    """
    best_aspect = min(max(image_h / image_w, geometry.aspect_min), geometry.aspect_max)
    max_area = min(best_aspect * image_w**2, image_h**2 / best_aspect)
    if max_area < geometry.area_min * image_h * image_w:
        raise ValueError(
            f"mask geometry infeasible for {image_h}x{image_w}: "
            f"no in-bounds rectangle reaches area fraction {geometry.area_min}"
        )


def sample_region(
    image_h: int, image_w: int, geometry: MaskGeometry, rng: np.random.Generator
) -> Rect:
    """Draw one rectangle: area and aspect uniform in range, position uniform."""
    if image_h < 1 or image_w < 1:
        raise ValueError("image dimensions must be positive")
    h = w = 0
    for _ in range(REGION_RESAMPLE_TRIES):
        area = rng.uniform(geometry.area_min, geometry.area_max) * image_h * image_w
        aspect = rng.uniform(geometry.aspect_min, geometry.aspect_max)
        h = max(1, round(math.sqrt(area * aspect)))
        w = max(1, round(math.sqrt(area / aspect)))
        if h <= image_h and w <= image_w:
            break
    h = min(h, image_h)
    w = min(w, image_w)
    top = int(rng.integers(0, image_h - h + 1))
    left = int(rng.integers(0, image_w - w + 1))
    return Rect(top, left, h, w)


def plan_masking(
    batch_size: int,
    ratio: float,
    image_h: int,
    image_w: int,
    geometry: MaskGeometry,
    rng: np.random.Generator,
) -> MaskPlan:
    """Build the per-batch plan: who gets masked, on which modality, where."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_masked = int(ratio * batch_size)
    n_rgb = n_masked // 2
    order = rng.permutation(batch_size)
    assignments = [MaskTarget.FULL] * batch_size
    for i in order[:n_rgb]:
        assignments[i] = MaskTarget.MASK_RGB
    for i in order[n_rgb:n_masked]:
        assignments[i] = MaskTarget.MASK_AUX
    regions: list[list[Rect]] = []
    for a in assignments:
        if a is MaskTarget.FULL:
            regions.append([])
        else:
            regions.append(
                [sample_region(image_h, image_w, geometry, rng) for _ in range(geometry.regions)]
            )
    return MaskPlan(assignments, regions)


def apply_masking(
    rgb: torch.Tensor, aux: torch.Tensor, plan: MaskPlan
) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero the planned rectangles on the planned modality of each sample.

    Inputs are [B, C, H, W]; returns corrupted copies, originals untouched.
    """
    if rgb.shape[0] != plan.batch_size or aux.shape[0] != plan.batch_size:
        raise ValueError(
            f"plan for batch {plan.batch_size} applied to tensors of batch "
            f"{rgb.shape[0]}/{aux.shape[0]}"
        )
    if rgb.shape[-2:] != aux.shape[-2:]:
        raise ValueError("modalities must share spatial dimensions")
    out_rgb = rgb.clone()
    out_aux = aux.clone()
    for i, (target, rects) in enumerate(zip(plan.assignments, plan.regions)):
        if target is MaskTarget.FULL:
            continue
        dest = out_rgb if target is MaskTarget.MASK_RGB else out_aux
        for r in rects:
            if r.top < 0 or r.left < 0 or r.top + r.height > rgb.shape[-2] or r.left + r.width > rgb.shape[-1]:
                raise ValueError(f"rectangle {r} exceeds image bounds {tuple(rgb.shape[-2:])}")
            dest[i, :, r.top : r.top + r.height, r.left : r.left + r.width] = 0.0
    return out_rgb, out_aux


def rect_union_mask(image_h: int, image_w: int, rects: list[Rect]) -> np.ndarray:
    """Boolean raster of the union of rectangles (diagnostic helper)."""
    mask = np.zeros((image_h, image_w), dtype=bool)
    for r in rects:
        mask[r.top : r.top + r.height, r.left : r.left + r.width] = True
    return mask
