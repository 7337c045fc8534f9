"""Localisation regression plus confidence classification, summed over the batch."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .network import Assignment, HeadOutput


@dataclass(frozen=True)
class LossBreakdown:
    geo: torch.Tensor
    cls: torch.Tensor
    total: torch.Tensor

    def items(self) -> tuple[float, float, float]:
        return float(self.geo.detach()), float(self.cls.detach()), float(self.total.detach())


def _as_list(assignments: Assignment | Sequence[Assignment]) -> list[Assignment]:
    return [assignments] if isinstance(assignments, Assignment) else list(assignments)


def _positive_index(raw: HeadOutput, assignments: list[Assignment]):
    if len(assignments) != raw.grid.shape[0]:
        raise ValueError(f"{len(assignments)} assignments for a batch of {raw.grid.shape[0]}")
    gh, gw, na = raw.grid.shape[1:4]
    for a in assignments:
        r, c = a.cell
        if not (0 <= r < gh and 0 <= c < gw and 0 <= a.anchor_index < na):
            raise ValueError(f"assignment {a} invalid for grid {gh}x{gw}x{na}")
    b = torch.arange(len(assignments))
    rows = torch.tensor([a.cell[0] for a in assignments])
    cols = torch.tensor([a.cell[1] for a in assignments])
    anc = torch.tensor([a.anchor_index for a in assignments])
    return b, rows, cols, anc


def geo_loss(raw: HeadOutput, assignments: Assignment | Sequence[Assignment], anchors=None,
             reduction: str = "sum") -> torch.Tensor:
    """Squared error on sigmoid center offsets and log size ratios at the positive anchor."""
    assignments = _as_list(assignments)
    anchors = raw.anchors if anchors is None else anchors
    b, rows, cols, anc = _positive_index(raw, assignments)
    pred = raw.grid[b, rows, cols, anc]  # (B, 5)
    dtype = pred.dtype
    tgt = []
    for a in assignments:
        x, y, w, h = a.targets
        if not (w > 0 and h > 0):
            raise ValueError(f"non-positive target size ({w}, {h})")
        wa, ha = anchors[a.anchor_index]
        tgt.append((x - math.floor(x), y - math.floor(y), math.log(w / wa), math.log(h / ha)))
    tgt = torch.tensor(tgt, dtype=dtype)
    terms = torch.stack([
        torch.sigmoid(pred[:, 0]) - tgt[:, 0],
        torch.sigmoid(pred[:, 1]) - tgt[:, 1],
        pred[:, 2] - tgt[:, 2],
        pred[:, 3] - tgt[:, 3],
    ], dim=1)
    per_sample = terms.square().sum(dim=1)
    return per_sample.sum() if reduction == "sum" else per_sample.mean()


def cls_loss(raw: HeadOutput, assignments: Assignment | Sequence[Assignment], neg_weight: float = 1.0,
             reduction: str = "sum") -> torch.Tensor:
    """Binary cross-entropy on every (cell, anchor); only the assigned pair is positive."""
    assignments = _as_list(assignments)
    b, rows, cols, anc = _positive_index(raw, assignments)
    logits = raw.grid[..., 4]
    target = torch.zeros_like(logits)
    target[b, rows, cols, anc] = 1.0
    weight = torch.full_like(logits, neg_weight)
    weight[b, rows, cols, anc] = 1.0
    per_elem = F.binary_cross_entropy_with_logits(logits, target, weight=weight, reduction="none")
    per_sample = per_elem.flatten(1).sum(dim=1)
    return per_sample.sum() if reduction == "sum" else per_sample.mean()


def total_loss(raw: HeadOutput, assignments: Assignment | Sequence[Assignment], anchors=None,
               neg_weight: float = 1.0, reduction: str = "sum") -> LossBreakdown:
    geo = geo_loss(raw, assignments, anchors, reduction)
    cls = cls_loss(raw, assignments, neg_weight, reduction)
    return LossBreakdown(geo, cls, geo + cls)
