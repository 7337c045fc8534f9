"""Keypoint- and mask-based positional encodings of the query image.

The keypoint encoding is a squared, diagonal-normalised inverse-distance
field around the marking point. The mask encoding sets the selected object
mask to 1.0 and keeps the keypoint field on the background.
"""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .geometry import MarkingPoint

log = logging.getLogger(__name__)

ALPHA_MIN = 0.005
ALPHA_MAX = 0.5
MASK_CMD_ENV = "EDGEO_MASK_CMD"


class MaskProviderError(RuntimeError):
    """Raised when a mask provider cannot produce candidates; callers may fall back to KPE."""


@dataclass(frozen=True, eq=False)
class Mask:
    values: np.ndarray
    area: int = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask must be binary")
        v = v.astype(np.uint8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "area", int(v.sum()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def contains(self, p: MarkingPoint) -> bool:
        r, c = int(round(p.y)), int(round(p.x))
        h, w = self.shape
        return 0 <= r < h and 0 <= c < w and bool(self.values[r, c])

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.values, other.values)

    def save_png(self, path: str | Path) -> None:
        Image.fromarray(self.values * 255).save(path)

    @classmethod
    def load_png(cls, path: str | Path) -> "Mask":
        arr = np.asarray(Image.open(path).convert("L"))
        return cls((arr > 127).astype(np.uint8))


@dataclass(frozen=True)
class MaskCandidates:
    masks: tuple[Mask, ...]

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)


def _diag_distance(height: int, width: int, p: MarkingPoint, dtype) -> tuple[np.ndarray, float]:
    p.check_inside(height, width)
    rows = np.arange(height, dtype=dtype)[:, None]
    cols = np.arange(width, dtype=dtype)[None, :]
    dist = np.sqrt((cols - dtype(p.x)) ** 2 + (rows - dtype(p.y)) ** 2)
    return dist, float(np.sqrt(np.float64(width) ** 2 + np.float64(height) ** 2))


def kpe(height: int, width: int, p: MarkingPoint, dtype=np.float32) -> np.ndarray:
    """Keypoint encoding, ``(1 - d / diag) ** 2`` at every pixel."""
    dist, const = _diag_distance(height, width, p, dtype)
    field_ = (1 - dist / dtype(const)) ** 2
    return np.clip(field_, 0, 1).astype(dtype, copy=False)


def mpe(height: int, width: int, p: MarkingPoint, mask: Mask, dtype=np.float32) -> np.ndarray:
    """Mask encoding: 1.0 on the mask foreground, the keypoint field elsewhere."""
    if mask.shape != (height, width):
        raise ValueError(f"mask shape {mask.shape} does not match image ({height}, {width})")
    field_ = kpe(height, width, p, dtype)
    field_[mask.values.astype(bool)] = 1.0
    return field_


def select_mask(
    candidates: MaskCandidates | Sequence[Mask],
    image_area: float,
    alpha_min: float = ALPHA_MIN,
    alpha_max: float = ALPHA_MAX,
) -> Mask:
    """Pick a medium-area mask after dropping speckle and near-whole-image hypotheses.

    Survivors are sorted by area and the lower median is returned. If every
    candidate is filtered out, the one closest in area to the geometric mean
    of the two bounds wins.
    """
    masks = list(candidates)
    if not masks:
        raise ValueError("no mask candidates to select from")
    lo, hi = alpha_min * image_area, alpha_max * image_area
    survivors = [m for m in masks if lo <= m.area <= hi]
    if survivors:
        survivors.sort(key=lambda m: m.area)
        return survivors[(len(survivors) - 1) // 2]
    target = np.sqrt(lo * hi)
    return min(masks, key=lambda m: abs(m.area - target))


class MaskProvider(Protocol):
    def __call__(self, image: np.ndarray, p: MarkingPoint) -> Sequence[Mask]: ...


class SyntheticMaskProvider:
    """Oracle provider: returns the ground-truth object mask it was constructed with."""

    def __init__(self, mask: Mask):
        self.mask = mask

    def __call__(self, image: np.ndarray, p: MarkingPoint) -> Sequence[Mask]:
        return [self.mask]


class ExternalMaskProvider:
    """Forwards (image, point) to a promptable segmentation command.

    The command template is tokenised with :func:`shlex.split` and each token
    is formatted with ``{image}``, ``{x}``, ``{y}``, ``{point}`` (``"x,y"``)
    and ``{out_dir}``. The command must write one PNG per mask hypothesis
    into ``out_dir``.
    """

    def __init__(self, command: str | None = None, timeout: float = 300.0):
        command = command or os.environ.get(MASK_CMD_ENV)
        if not command:
            raise MaskProviderError(f"no mask command configured (set {MASK_CMD_ENV} or mask_provider.command)")
        self.command = command
        self.timeout = timeout

    def __call__(self, image: np.ndarray, p: MarkingPoint) -> Sequence[Mask]:
        with tempfile.TemporaryDirectory(prefix="edgeo-mask-") as tmp:
            tmp = Path(tmp)
            img_path = tmp / "query.png"
            out_dir = tmp / "masks"
            out_dir.mkdir()
            save_rgb_png(image, img_path)
            x, y = int(round(p.x)), int(round(p.y))
            subs = dict(image=str(img_path), x=x, y=y, point=f"{x},{y}", out_dir=str(out_dir))
            argv = [tok.format(**subs) for tok in shlex.split(self.command)]
            try:
                subprocess.run(argv, check=True, timeout=self.timeout, capture_output=True)
            except (OSError, subprocess.SubprocessError) as exc:
                raise MaskProviderError(f"mask command failed: {exc}") from exc
            files = sorted(out_dir.glob("*.png"))
            if not files:
                raise MaskProviderError("mask command produced no hypotheses")
            return [Mask.load_png(f) for f in files]


def provide_masks(image: np.ndarray, p: MarkingPoint, provider: MaskProvider) -> MaskCandidates:
    """Query ``provider`` and keep only hypotheses that contain the prompt point."""
    height, width = image.shape[-2:]
    p.check_inside(height, width)
    try:
        raw = provider(image, p)
    except MaskProviderError:
        raise
    except Exception as exc:
        raise MaskProviderError(f"mask provider raised {type(exc).__name__}: {exc}") from exc
    kept = tuple(m for m in raw if m.shape == (height, width) and m.contains(p))
    if not kept:
        raise MaskProviderError(f"no mask hypothesis contains point ({p.x}, {p.y})")
    return MaskCandidates(kept)


def mask_encoding(
    image: np.ndarray,
    p: MarkingPoint,
    provider: MaskProvider,
    alpha_min: float = ALPHA_MIN,
    alpha_max: float = ALPHA_MAX,
    fallback: bool = True,
) -> np.ndarray:
    """Full MPE pipeline: provide, select, encode. Falls back to KPE on provider failure."""
    height, width = image.shape[-2:]
    try:
        cands = provide_masks(image, p, provider)
    except MaskProviderError as exc:
        if not fallback:
            raise
        log.warning("mask provider failed (%s); falling back to KPE", exc)
        return kpe(height, width, p)
    return mpe(height, width, p, select_mask(cands, height * width, alpha_min, alpha_max))


def save_rgb_png(image: np.ndarray, path: str | Path) -> None:
    """Write a CHW float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    arr = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_encoding_png(values: np.ndarray, path: str | Path) -> None:
    """Export an encoding field as 8-bit grayscale (``round(value * 255)``)."""
    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
