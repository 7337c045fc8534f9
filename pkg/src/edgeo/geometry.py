"""Boxes, IoU, acc@k and IoU-distance anchor clustering.

Boxes are stored in center format ``(cx, cy, w, h)`` in pixels; the corner
form is a derived view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Anchor prior list published for CVOGL, (w, h) in reference pixels.
CVOGL_ANCHORS: tuple[tuple[float, float], ...] = (
    (37, 41), (78, 84), (96, 215), (129, 129), (194, 82),
    (198, 179), (246, 280), (395, 342), (550, 573),
)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def left(self) -> float:
        return self.cx - self.w / 2

    @property
    def right(self) -> float:
        return self.cx + self.w / 2

    @property
    def top(self) -> float:
        return self.cy - self.h / 2

    @property
    def bottom(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return self.left, self.top, self.right, self.bottom

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


@dataclass(frozen=True)
class MarkingPoint:
    """Click location in query-image pixels (x = column, y = row)."""

    x: float
    y: float

    def check_inside(self, height: int, width: int) -> None:
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise ValueError(f"marking point ({self.x}, {self.y}) outside {width}x{height} image")


class AnchorSet(tuple):
    """Ordered, immutable sequence of ``(w, h)`` anchor priors."""

    def __new__(cls, anchors: Iterable[Sequence[float]]):
        pairs = tuple((float(w), float(h)) for w, h in anchors)
        if not pairs:
            raise ValueError("anchor set is empty")
        for w, h in pairs:
            if not (w > 0 and h > 0):
                raise ValueError(f"anchor dims must be positive, got ({w}, {h})")
        return super().__new__(cls, pairs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self, dtype=np.float64)

    def to_json(self) -> str:
        return json.dumps([[w, h] for w, h in self])

    @classmethod
    def from_json(cls, text: str) -> "AnchorSet":
        return cls(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AnchorSet":
        return cls.from_json(Path(path).read_text())


def iou(a: Box, b: Box) -> float:
    """Analytic intersection-over-union of two boxes."""
    for box in (a, b):
        if not (box.w > 0 and box.h > 0):
            raise ValueError(f"degenerate box: {box}")
    # overlap of centred intervals, exact for identical boxes (no corner round-off)
    iw = min(a.w, b.w, (a.w + b.w) / 2 - abs(a.cx - b.cx))
    ih = min(a.h, b.h, (a.h + b.h) / 2 - abs(a.cy - b.cy))
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / (a.area + b.area - inter), 1.0)


def acc_at_k(predictions: Sequence[Box | None], truths: Sequence[Box], k: float) -> float:
    """Fraction of pairs whose IoU strictly exceeds ``k``.

    A ``None`` prediction counts as a miss.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    if not truths:
        raise ValueError("acc@k of an empty list is undefined")
    if not 0 <= k < 1:
        raise ValueError(f"threshold must lie in [0, 1), got {k}")
    hits = sum(1 for p, t in zip(predictions, truths) if p is not None and iou(p, t) > k)
    return hits / len(truths)


def wh_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of co-centered boxes; ``wh`` is (N, 2), ``anchors`` is (K, 2) -> (N, K)."""
    wh = np.asarray(wh, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    inter = np.minimum(wh[:, None, 0], anchors[None, :, 0]) * np.minimum(wh[:, None, 1], anchors[None, :, 1])
    union = (wh[:, 0] * wh[:, 1])[:, None] + (anchors[:, 0] * anchors[:, 1])[None, :] - inter
    return inter / union


def mean_best_iou(boxes: np.ndarray, anchors: Sequence[Sequence[float]]) -> float:
    """Average over boxes of the IoU with the best-matching anchor."""
    return float(wh_iou(np.asarray(boxes, dtype=np.float64), np.asarray(anchors)).max(axis=1).mean())


def _lloyd(boxes: np.ndarray, centers: np.ndarray, max_iter: int) -> np.ndarray:
    # Mean updates do not minimise 1-IoU exactly, so keep the best iterate seen.
    best, best_score = centers.copy(), mean_best_iou(boxes, centers)
    prev_assign = None
    for _ in range(max_iter):
        dist = 1.0 - wh_iou(boxes, centers)
        assign = np.argmin(dist, axis=1)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        new = centers.copy()
        for j in range(len(centers)):
            members = boxes[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # Empty cluster: move it onto the worst-served box.
                worst = int(np.argmax(dist[np.arange(len(boxes)), assign]))
                new[j] = boxes[worst]
        centers = new
        score = mean_best_iou(boxes, centers)
        if score > best_score:
            best, best_score = centers.copy(), score
    return best


def cluster_anchors(boxes: Sequence[Sequence[float]], k: int, seed: int = 0, max_iter: int = 300) -> AnchorSet:
    """k-means over box shapes with distance ``1 - IoU`` of co-centered boxes.

    Centers are grown one at a time: each new center is drawn by k-means++
    weighting against the current set, then Lloyd iterations refine all
    centers. The solution for ``k`` therefore extends the one for ``k - 1``
    under the same seed, and coverage never gets worse as ``k`` grows.
    The result is sorted by area, ascending.
    """
    data = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(data) < k:
        raise ValueError(f"cannot form {k} clusters from {len(data)} boxes")
    if np.any(data <= 0):
        raise ValueError("box dims must be positive")

    rng = np.random.Generator(np.random.PCG64(seed))
    centers = data[[rng.integers(len(data))]]
    centers = _lloyd(data, centers, max_iter)
    while len(centers) < k:
        d = 1.0 - wh_iou(data, centers).max(axis=1)
        weights = d ** 2
        total = weights.sum()
        if total > 0:
            idx = rng.choice(len(data), p=weights / total)
        else:
            idx = rng.integers(len(data))
        centers = np.vstack([centers, data[idx]])
        centers = _lloyd(data, centers, max_iter)

    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    return AnchorSet(centers[order].tolist())


def box_inside(box: Box, width: float, height: float) -> bool:
    return box.left >= 0 and box.top >= 0 and box.right <= width and box.bottom <= height
