"""Deterministic synthetic cross-view samples.

A reference "satellite" image holds axis-aligned coloured rectangles on a
smooth textured background. The query is a rotated and rescaled view of the
reference around one designated target, with mild photometric jitter. All
randomness comes from ``numpy.random.PCG64`` seeded by
``SeedSequence([seed, index])``, so samples are reproducible across
processes and platforms.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Box, MarkingPoint, box_inside
from .posenc import Mask

GENERATOR_VERSION = "edgeo-synth-1"
SCHEMA_VERSION = 1
ELONGATED_ASPECT = 1.5


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 6
    aspect_range: tuple[float, float] = (1.0, 3.5)
    elongated_fraction: float = 0.5
    side_range: tuple[float, float] = (20.0, 48.0)  # sqrt(area) in reference pixels
    rotations: tuple[float, ...] = (0.0, 90.0, 15.0, -15.0)
    scale_range: tuple[float, float] = (0.8, 1.25)
    center_jitter: float = 24.0  # query pixels
    min_visible: float = 0.6
    query_size: tuple[int, int] = (128, 128)
    reference_size: tuple[int, int] = (256, 256)
    palette_size: int = 12
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        lo, hi = self.aspect_range
        if not 1.0 <= lo <= hi:
            raise ValueError(f"aspect_range must satisfy 1 <= min <= max, got {self.aspect_range}")
        if not 0.0 <= self.elongated_fraction <= 1.0:
            raise ValueError(f"elongated_fraction must lie in [0, 1], got {self.elongated_fraction}")
        if self.elongated_fraction > 0 and hi <= ELONGATED_ASPECT:
            raise ValueError("elongated objects need aspect_range max > 1.5")
        if self.elongated_fraction < 1 and lo > ELONGATED_ASPECT:
            raise ValueError("compact objects need aspect_range min <= 1.5")
        if self.n_objects < 1 or self.n_objects > self.palette_size:
            raise ValueError(f"n_objects must lie in [1, palette_size={self.palette_size}]")

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(eq=False)
class Sample:
    """One task instance. Images are uint8 CHW so they survive PNG round trips exactly."""

    query_image: np.ndarray
    reference_image: np.ndarray
    point: MarkingPoint
    mask: Mask | None
    gt_box: Box
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        _, hr, wr = self.reference_image.shape
        if not box_inside(self.gt_box, wr, hr):
            raise DatasetError(f"gt box {self.gt_box} outside {wr}x{hr} reference")
        if self.mask is not None and not self.mask.contains(self.point):
            raise DatasetError(f"marking point {self.point} not on mask foreground")

    @property
    def query_float(self) -> np.ndarray:
        return self.query_image.astype(np.float32) / 255.0

    @property
    def reference_float(self) -> np.ndarray:
        return self.reference_image.astype(np.float32) / 255.0

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and np.array_equal(self.query_image, other.query_image)
            and np.array_equal(self.reference_image, other.reference_image)
            and self.point == other.point
            and self.mask == other.mask
            and self.gt_box == other.gt_box
            and self.meta == other.meta
        )


def _palette(n: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(i / n, 0.85 if i % 2 == 0 else 0.6, 0.95 if i % 2 == 0 else 0.75) for i in range(n)]
    return np.asarray(cols, dtype=np.float64)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.55, size=(1, 9, 9)) + rng.uniform(-0.04, 0.04, size=(3, 1, 1))
    smooth = ndimage.zoom(coarse, (1, h / 9, w / 9), order=1, mode="nearest", grid_mode=True)[:, :h, :w]
    return smooth + rng.normal(0.0, 0.02, size=(3, h, w))


def _place_objects(cfg: SceneConfig, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Non-overlapping integer rectangles (x0, y0, w, h); the first ones are elongated."""
    hr, wr = cfg.reference_size
    n_long = int(round(cfg.elongated_fraction * cfg.n_objects))
    lo, hi = cfg.aspect_range
    rects: list[tuple[int, int, int, int]] = []
    margin, gap = 4, 6
    for j in range(cfg.n_objects):
        for _ in range(200 * cfg.max_retries):
            side = rng.uniform(*cfg.side_range)
            if j < n_long:
                aspect = rng.uniform(max(lo, ELONGATED_ASPECT), hi)
            else:
                aspect = rng.uniform(lo, min(hi, ELONGATED_ASPECT))
            long_, short = side * math.sqrt(aspect), side / math.sqrt(aspect)
            long_i, short_i = int(round(long_)), max(int(round(short)), 4)
            if j < n_long and long_i <= ELONGATED_ASPECT * short_i:
                long_i = int(math.floor(ELONGATED_ASPECT * short_i)) + 1
            if j >= n_long and long_i > ELONGATED_ASPECT * short_i:
                long_i = int(math.floor(ELONGATED_ASPECT * short_i))
            w, h = (long_i, short_i) if rng.random() < 0.5 else (short_i, long_i)
            if w + 2 * margin > wr or h + 2 * margin > hr:
                continue
            x0 = int(rng.integers(margin, wr - margin - w + 1))
            y0 = int(rng.integers(margin, hr - margin - h + 1))
            if all(x0 + w + gap <= a or a + c + gap <= x0 or y0 + h + gap <= b or b + d + gap <= y0
                   for a, b, c, d in rects):
                rects.append((x0, y0, w, h))
                break
        else:
            raise DatasetError(f"could not place object {j} without overlap")
    return rects


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_sample(cfg: SceneConfig, index: int) -> Sample:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, index])))
    hr, wr = cfg.reference_size
    hq, wq = cfg.query_size

    rects = _place_objects(cfg, rng)
    colors = _palette(cfg.palette_size)[rng.permutation(cfg.palette_size)[: cfg.n_objects]]
    ref = _background(rng, hr, wr)
    for (x0, y0, w, h), col in zip(rects, colors):
        ref[:, y0 : y0 + h, x0 : x0 + w] = col[:, None, None] + rng.normal(0.0, 0.015, size=(3, h, w))
    ref_u8 = _to_uint8(ref)
    ref_f = ref_u8.astype(np.float64) / 255.0

    target = index % cfg.n_objects
    x0, y0, w, h = rects[target]
    rows, cols = np.mgrid[0:hq, 0:wq].astype(np.float64)
    qx, qy = cols + 0.5 - wq / 2, rows + 0.5 - hq / 2

    for _ in range(cfg.max_retries):
        theta = float(cfg.rotations[int(rng.integers(len(cfg.rotations)))])
        scale = float(rng.uniform(*cfg.scale_range))
        jx, jy = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
        # query pixel center -> continuous reference coordinate
        t = math.radians(theta)
        ct, st = math.cos(t), math.sin(t)
        ux, uy = (qx - jx) / scale, (qy - jy) / scale
        rx = x0 + w / 2 + ct * ux - st * uy
        ry = y0 + h / 2 + st * ux + ct * uy
        fg = (rx >= x0) & (rx < x0 + w) & (ry >= y0) & (ry < y0 + h)
        if fg.sum() >= cfg.min_visible * w * h * scale * scale and fg.any():
            break
    else:
        raise DatasetError(f"sample {index}: target clipped out of the query view after {cfg.max_retries} retries")

    query = np.stack([
        ndimage.map_coordinates(ref_f[c], [ry - 0.5, rx - 0.5], order=1, mode="constant", cval=0.4)
        for c in range(3)
    ])
    gain, bias = rng.uniform(0.9, 1.1), rng.uniform(-0.04, 0.04)
    query = query * gain + bias + rng.normal(0.0, 0.02, size=query.shape)
    query_u8 = _to_uint8(query)

    ys, xs = np.nonzero(fg)
    pick = int(rng.integers(len(xs)))
    point = MarkingPoint(float(xs[pick]), float(ys[pick]))
    aspect = max(w, h) / min(w, h)
    meta = {
        "seed": cfg.seed,
        "index": index,
        "generator_version": GENERATOR_VERSION,
        "target_index": target,
        "aspect": aspect,
        "elongated": aspect > ELONGATED_ASPECT,
        "rotation": theta,
        "scale": scale,
    }
    gt = Box(x0 + w / 2, y0 + h / 2, float(w), float(h))
    return Sample(query_u8, ref_u8, point, Mask(fg.astype(np.uint8)), gt, meta)


def generate_dataset(cfg: SceneConfig, n: int, start: int = 0) -> list[Sample]:
    return [generate_sample(cfg, i) for i in range(start, start + n)]


def object_boxes(cfg: SceneConfig, n_scenes: int) -> list[tuple[int, int]]:
    """(w, h) of every object in the first ``n_scenes`` scenes, for anchor statistics."""
    out = []
    for i in range(n_scenes):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, i])))
        out.extend((w, h) for _, _, w, h in _place_objects(cfg, rng))
    return out


# -- on-disk layout ------------------------------------------------------------

def _save_chw(img: np.ndarray, path: Path) -> None:
    Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0))).save(path)


def _load_chw(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB")).transpose(2, 0, 1).copy()


def write_samples(samples: Sequence[Sample], directory: str | Path, config: dict[str, Any] | None = None) -> Path:
    """Write PNGs plus ``manifest.json``; the manifest is written last, atomically."""
    root = Path(directory)
    for sub in ("query", "reference", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        rec = {
            "id": sid,
            "query": f"query/{sid}.png",
            "reference": f"reference/{sid}.png",
            "mask": None,
            "point": [s.point.x, s.point.y],
            "gt_box": s.gt_box.as_list(),
            "meta": s.meta,
        }
        _save_chw(s.query_image, root / rec["query"])
        _save_chw(s.reference_image, root / rec["reference"])
        if s.mask is not None:
            rec["mask"] = f"mask/{sid}.png"
            s.mask.save_png(root / rec["mask"])
        records.append(rec)
    manifest = {"schema_version": SCHEMA_VERSION, "generator_version": GENERATOR_VERSION,
                "config": config or {}, "samples": records}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(root / "manifest.json")
    return root


def write_dataset(cfg: SceneConfig, n: int, directory: str | Path, start: int = 0) -> list[Sample]:
    samples = generate_dataset(cfg, n, start)
    write_samples(samples, directory, cfg.to_dict())
    return samples


def read_manifest(directory: str | Path) -> dict[str, Any]:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from None
    if manifest.get("schema_version") != SCHEMA_VERSION or not isinstance(manifest.get("samples"), list):
        raise DatasetError(f"{path}: unsupported or malformed manifest")
    return manifest


def read_dataset(directory: str | Path) -> list[Sample]:
    root = Path(directory)
    manifest = read_manifest(root)
    samples = []
    for rec in manifest["samples"]:
        sid = rec.get("id", "?")
        try:
            files = {k: root / rec[k] for k in ("query", "reference")}
            if rec.get("mask"):
                files["mask"] = root / rec["mask"]
            for key, f in files.items():
                if not f.is_file():
                    raise DatasetError(f"sample {sid}: missing {key} file {f}")
            mask = Mask.load_png(files["mask"]) if "mask" in files else None
            samples.append(Sample(
                _load_chw(files["query"]),
                _load_chw(files["reference"]),
                MarkingPoint(*map(float, rec["point"])),
                mask,
                Box(*map(float, rec["gt_box"])),
                rec.get("meta", {}),
            ))
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"sample {sid}: malformed record ({exc})") from exc
    return samples
