"""Segmentation objective: fused cross-entropy plus hard-pixel auxiliary terms.

The fused prediction is trained with plain cross-entropy. The two
modality-specific predictions are supervised only on the hard-pixel set,
the pixels the fused prediction currently gets wrong. The set is built
from a detached copy of the fused logits, so no gradient flows through
its construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    main: float
    aux_rgb: float
    aux_aux: float
    total: float
    hard_pixel_fraction: float

    def as_dict(self) -> dict[str, float]:
        return {
            "loss_main": self.main,
            "loss_aux_rgb": self.aux_rgb,
            "loss_aux_aux": self.aux_aux,
            "loss_total": self.total,
            "hard_pixel_fraction": self.hard_pixel_fraction,
        }


def valid_mask(labels: torch.Tensor, ignore_index: int | None) -> torch.Tensor:
    if ignore_index is None:
        return torch.ones_like(labels, dtype=torch.bool)
    return labels != ignore_index


def _pixel_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-pixel -log softmax probability of the true class, shape [B, H, W]."""
    logp = torch.log_softmax(logits, dim=1)
    safe = labels.clamp(min=0, max=logits.shape[1] - 1)  # ignored pixels are masked out later
    return -logp.gather(1, safe.unsqueeze(1)).squeeze(1)


def main_loss(
    logits: torch.Tensor, labels: torch.Tensor, ignore_index: int | None = None
) -> torch.Tensor:
    """Mean cross-entropy over non-ignored pixels; 0 if nothing is valid."""
    valid = valid_mask(labels, ignore_index)
    if not bool(valid.any()):
        logger.warning("cross-entropy over zero valid pixels, returning 0")
        return logits.sum() * 0.0
    per_pixel = _pixel_cross_entropy(logits, labels)
    return per_pixel[valid].mean()


def hard_pixel_mask(
    logits: torch.Tensor, labels: torch.Tensor, ignore_index: int | None = None
) -> torch.Tensor:
    """Boolean [B, H, W] mask of valid pixels the fused argmax misclassifies.

    Argmax ties resolve to the lowest class index. The logits are treated
    as constants here, so the mask never carries gradient.
    """
    with torch.no_grad():
        pred = logits.argmax(dim=1)
        wrong = pred != labels
        return wrong & valid_mask(labels, ignore_index)


def aux_loss(
    logits_rgb: torch.Tensor,
    logits_aux: torch.Tensor,
    labels: torch.Tensor,
    hard: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean cross-entropy of each auxiliary prediction over hard pixels only."""
    if not bool(hard.any()):
        zero = logits_rgb.sum() * 0.0
        return zero, logits_aux.sum() * 0.0
    term_rgb = _pixel_cross_entropy(logits_rgb, labels)[hard].mean()
    term_aux = _pixel_cross_entropy(logits_aux, labels)[hard].mean()
    return term_rgb, term_aux


def total_loss(
    logits: torch.Tensor,
    logits_rgb: torch.Tensor | None,
    logits_aux: torch.Tensor | None,
    labels: torch.Tensor,
    lambda_aux: float,
    ignore_index: int | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Full objective: main + lambda_aux * (aux_rgb + aux_aux).

    Auxiliary logits may be None (masking disabled); their terms are then 0.
    """
    if lambda_aux < 0:
        raise ValueError(f"lambda_aux must be >= 0, got {lambda_aux}")
    main = main_loss(logits, labels, ignore_index)
    valid = valid_mask(labels, ignore_index)
    n_valid = int(valid.sum())
    if logits_rgb is not None and logits_aux is not None:
        hard = hard_pixel_mask(logits, labels, ignore_index)
        term_rgb, term_aux = aux_loss(logits_rgb, logits_aux, labels, hard)
        hard_fraction = float(hard.sum()) / n_valid if n_valid else 0.0
    else:
        term_rgb = logits.sum() * 0.0
        term_aux = logits.sum() * 0.0
        hard_fraction = 0.0
    total = main + lambda_aux * (term_rgb + term_aux)
    breakdown = LossBreakdown(
        main=float(main.detach()),
        aux_rgb=float(term_rgb.detach()),
        aux_aux=float(term_aux.detach()),
        total=float(total.detach()),
        hard_pixel_fraction=hard_fraction,
    )
    return total, breakdown
