"""Cross-view object geo-localization with mask-based positional encoding and strip-convolution context."""

from .geometry import AnchorSet, Box, MarkingPoint, acc_at_k, cluster_anchors, iou
from .posenc import Mask, kpe, mpe, select_mask

__all__ = [
    "AnchorSet",
    "Box",
    "MarkingPoint",
    "Mask",
    "acc_at_k",
    "cluster_anchors",
    "iou",
    "kpe",
    "mpe",
    "select_mask",
]

__version__ = "0.1.0"
