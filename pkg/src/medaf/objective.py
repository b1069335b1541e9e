"""Training objective: cross-entropy terms plus the attention-diversity penalty."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .network import ForwardBundle

COSINE_EPS = 1e-8

cross_entropy = ad.cross_entropy


def cam_postprocess(cam: Tensor) -> Tensor:
    """Zero everything at or below the map's own spatial mean: ``relu(cam - mean(cam))``."""
    return ad.relu(ad.center_spatial(cam))


def diversity_loss(processed_cams: Sequence[Tensor], eps: float = COSINE_EPS) -> Tensor:
    """Sum of cosine similarities over all unordered expert pairs.

    Accepts ``[H, W]`` maps (scalar result) or ``[B, H, W]`` batches, in which
    case the per-sample sums are averaged over the batch. Fewer than two maps
    give a constant zero.
    """
    cams = list(processed_cams)
    if not cams:
        raise DimensionError("diversity_loss needs at least one map")
    shape = cams[0].shape
    for c in cams[1:]:
        if c.shape != shape:
            raise DimensionError(f"CAM shapes differ: {shape} vs {c.shape}")
    if len(cams) < 2:
        return Tensor(0.0)
    batched = len(shape) == 3
    total = None
    for i in range(len(cams) - 1):
        for j in range(i + 1, len(cams)):
            cos = ad.cosine_similarity(cams[i], cams[j], eps=eps, batch_dims=1 if batched else 0)
            total = cos if total is None else total + cos
    return ad.mean(total) if batched else total


@dataclass
class LossBreakdown:
    total: Tensor
    ce_global: float
    ce_experts: float  # sum over experts, before beta1
    diversity: float  # before beta2

    def as_row(self) -> tuple[float, float, float, float]:
        return self.ce_global, self.ce_experts, self.diversity, self.total.item()


def total_loss(bundle: ForwardBundle, labels, beta1: float, beta2: float) -> LossBreakdown:
    """Fused cross-entropy + beta1 * sum of expert cross-entropies + beta2 * diversity.

    CAMs for the diversity term are taken at the ground-truth ``labels``
    regardless of which channel the bundle's ``cam_for_label`` holds.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B = bundle.fused_logits.shape[0]
    labels = np.broadcast_to(labels, (B,))
    ce_g = ad.cross_entropy(bundle.fused_logits, labels)
    ce_parts = [ad.cross_entropy(o.logits, labels) for o in bundle.expert_outputs]
    ce_sum = ce_parts[0]
    for part in ce_parts[1:]:
        ce_sum = ce_sum + part
    cams = [cam_postprocess(ad.take_channel(o.feature_map, labels)) for o in bundle.expert_outputs]
    div = diversity_loss(cams)

    total = ce_g
    if beta1:
        total = total + ce_sum * beta1
    if beta2 and len(cams) > 1:
        total = total + div * beta2
    return LossBreakdown(total, ce_g.item(), ce_sum.item(), div.item())
