"""Dual-branch encoders, query-conditioned fusion, CEM and the anchor head."""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .cem import cem_init
from .geometry import AnchorSet, Box, wh_iou

NUM_FIELDS = 5  # t_x, t_y, t_w, t_h, t_o
CHECKPOINT_FORMAT = "edgeo-checkpoint"
CHECKPOINT_VERSION = 1
_OBJ_PRIOR = 0.01

_ACT = {"silu": nn.SiLU, "relu": nn.ReLU, "leaky_relu": lambda: nn.LeakyReLU(0.1)}


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "tiny"
    downsample_factor: int = 16
    out_channels: int = 128
    widths: tuple[int, ...] = (16, 32, 64, 128)
    nonlinearity: str = "silu"
    query_in_channels: int = 4
    reference_in_channels: int = 3

    def __post_init__(self):
        if self.name not in ("tiny", "resnet18", "darknet53"):
            raise ValueError(f"unknown backbone {self.name!r}")
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample factor must be a power of two, got {f}")
        if self.name == "tiny" and 2 ** len(self.widths) != f:
            raise ValueError(f"tiny backbone with {len(self.widths)} blocks downsamples by {2 ** len(self.widths)}, not {f}")
        if self.nonlinearity not in _ACT:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def _conv_block(cin: int, cout: int, stride: int, act: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.GroupNorm(_groups(cout), cout),
        _ACT[act](),
    )


class TinyEncoder(nn.Module):
    """Stack of stride-2 conv/GroupNorm/activation blocks."""

    def __init__(self, in_channels: int, spec: BackboneSpec):
        super().__init__()
        layers, cin = [], in_channels
        for w in spec.widths:
            layers.append(_conv_block(cin, w, 2, spec.nonlinearity))
            cin = w
        self.body = nn.Sequential(*layers)
        self.proj = nn.Identity() if cin == spec.out_channels else nn.Conv2d(cin, spec.out_channels, 1)

    def forward(self, x):
        return self.proj(self.body(x))


class _DarkResidual(nn.Module):
    def __init__(self, c: int, act: str):
        super().__init__()
        self.a = _conv_block(c, c // 2, 1, act)
        self.b = nn.Sequential(nn.Conv2d(c // 2, c, 3, 1, 1, bias=False), nn.GroupNorm(_groups(c), c), _ACT[act]())

    def forward(self, x):
        return x + self.b(self.a(x))


class DarknetEncoder(nn.Module):
    """Darknet-style residual encoder truncated at the requested stride (random init)."""

    def __init__(self, in_channels: int, spec: BackboneSpec):
        super().__init__()
        repeats = (1, 2, 8, 8, 4)
        width = 32
        layers = [_conv_block(in_channels, width, 1, spec.nonlinearity)]
        for i in range(int(math.log2(spec.downsample_factor))):
            layers.append(_conv_block(width, width * 2, 2, spec.nonlinearity))
            width *= 2
            layers.extend(_DarkResidual(width, spec.nonlinearity) for _ in range(repeats[min(i, 4)]))
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(width, spec.out_channels, 1)

    def forward(self, x):
        return self.proj(self.body(x))


class ResNetEncoder(nn.Module):
    """torchvision ResNet-18 trunk (random init) up to stride 16, input conv widened as needed."""

    def __init__(self, in_channels: int, spec: BackboneSpec):
        super().__init__()
        from torchvision.models import resnet18

        if spec.downsample_factor != 16:
            raise ValueError("resnet18 backbone supports downsample factor 16 only")
        net = resnet18(weights=None)
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3)
        self.proj = nn.Conv2d(256, spec.out_channels, 1)

    def forward(self, x):
        return self.proj(self.body(x))


_ENCODERS = {"tiny": TinyEncoder, "darknet53": DarknetEncoder, "resnet18": ResNetEncoder}


class QueryAttentionFusion(nn.Module):
    """Spatial attention of reference features against a pooled query vector.

    ``A = sigmoid(<mean(f_q), f_r[:, h, w]> / sqrt(C))`` and the output is a
    1x1 projection of ``cat[f_r, f_r * A]`` back to ``C`` channels.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def attention(self, f_q: torch.Tensor, f_r: torch.Tensor) -> torch.Tensor:
        if f_q.shape[1] != f_r.shape[1]:
            raise ValueError(f"channel mismatch: query {f_q.shape[1]} vs reference {f_r.shape[1]}")
        q = f_q.mean(dim=(2, 3))
        logits = torch.einsum("bc,bchw->bhw", q, f_r) / math.sqrt(f_r.shape[1])
        return torch.sigmoid(logits)

    def forward(self, f_q: torch.Tensor, f_r: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn = self.attention(f_q, f_r)
        fused = self.proj(torch.cat([f_r, f_r * attn.unsqueeze(1)], dim=1))
        return fused, attn


class DetectionHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(channels, num_anchors * NUM_FIELDS, 1)
        with torch.no_grad():
            self.conv.bias.view(num_anchors, NUM_FIELDS)[:, 4].fill_(-math.log((1 - _OBJ_PRIOR) / _OBJ_PRIOR))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        b, _, gh, gw = f.shape
        out = self.conv(f).view(b, self.num_anchors, NUM_FIELDS, gh, gw)
        return out.permute(0, 3, 4, 1, 2)


@dataclass
class HeadOutput:
    """Raw head activations shaped (B, G_h, G_w, A, 5) plus decoding context."""

    grid: torch.Tensor
    stride: int
    anchors: AnchorSet
    attention: torch.Tensor | None = None
    decode_mode: str = "exp"

    def __getitem__(self, i: int) -> "HeadOutput":
        attn = None if self.attention is None else self.attention[i : i + 1]
        return HeadOutput(self.grid[i : i + 1], self.stride, self.anchors, attn, self.decode_mode)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    anchors: AnchorSet = field(default_factory=lambda: AnchorSet(((16, 16),) * 9))
    cem_enabled: bool = True
    kernel_length: int = 11
    cem_nonlinearity: str | None = None
    decode_mode: str = "exp"
    seed: int = 0


class EDGeoModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.decode_mode not in ("exp", "additive"):
            raise ValueError(f"unknown decode mode {cfg.decode_mode!r}")
        self.cfg = cfg
        spec = cfg.backbone
        c = spec.out_channels
        torch.manual_seed(cfg.seed)
        enc = _ENCODERS[spec.name]
        self.query_encoder = enc(spec.query_in_channels, spec)
        self.reference_encoder = enc(spec.reference_in_channels, spec)
        self.fusion = QueryAttentionFusion(c)
        self.cem = cem_init(c, cfg.kernel_length, seed=cfg.seed + 1, nonlinearity=cfg.cem_nonlinearity) if cfg.cem_enabled else None
        self.head = DetectionHead(c, len(cfg.anchors))

    @property
    def stride(self) -> int:
        return self.cfg.backbone.downsample_factor

    def encode_query(self, image: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
        image, pe = _batched(image), _batched(pe)
        if pe.shape[-2:] != image.shape[-2:]:
            raise ValueError(f"encoding field {tuple(pe.shape[-2:])} does not match query image {tuple(image.shape[-2:])}")
        self._check_divisible(image)
        return self.query_encoder(torch.cat([image - 0.5, pe - 0.5], dim=1))

    def encode_reference(self, image: torch.Tensor) -> torch.Tensor:
        image = _batched(image)
        self._check_divisible(image)
        return self.reference_encoder(image - 0.5)

    def _check_divisible(self, image: torch.Tensor) -> None:
        h, w = image.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} not divisible by downsample factor {self.stride}")

    def forward(self, query: torch.Tensor, pe: torch.Tensor, reference: torch.Tensor) -> HeadOutput:
        f_q = self.encode_query(query, pe)
        f_r = self.encode_reference(reference)
        fused, attn = self.fusion(f_q, f_r)
        feats = self.cem(fused) if self.cem is not None else fused
        return HeadOutput(self.head(feats), self.stride, self.cfg.anchors, attn, self.cfg.decode_mode)


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


@dataclass(frozen=True)
class Assignment:
    cell: tuple[int, int]  # (row, col)
    anchor_index: int
    targets: tuple[float, float, float, float]  # x*, y* in grid units; w*, h* in pixels


def assign(gt: Box, anchors: Sequence[Sequence[float]], grid_dims: tuple[int, int], stride: int) -> Assignment:
    """Responsible cell and best-IoU anchor for a ground-truth box."""
    gh, gw = grid_dims
    if not (0 <= gt.cx < gw * stride and 0 <= gt.cy < gh * stride):
        raise ValueError(f"box center ({gt.cx}, {gt.cy}) outside {gw * stride}x{gh * stride} reference")
    x, y = gt.cx / stride, gt.cy / stride
    ious = wh_iou(np.array([[gt.w, gt.h]]), np.asarray(anchors, dtype=np.float64))[0]
    return Assignment((int(math.floor(y)), int(math.floor(x))), int(np.argmax(ious)), (x, y, gt.w, gt.h))


def ideal_raw(a: Assignment, anchors: Sequence[Sequence[float]], eps: float = 1e-7) -> tuple[float, float, float, float]:
    """Raw (t_x, t_y, t_w, t_h) that decodes exactly to the assignment's box."""
    x, y, w, h = a.targets
    fx = min(max(x - math.floor(x), eps), 1 - eps)
    fy = min(max(y - math.floor(y), eps), 1 - eps)
    wa, ha = anchors[a.anchor_index]
    return math.log(fx / (1 - fx)), math.log(fy / (1 - fy)), math.log(w / wa), math.log(h / ha)


def _sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def decode(raw: HeadOutput, cell: tuple[int, int], anchor_index: int, batch_index: int = 0) -> tuple[Box, float]:
    """Convert one (cell, anchor) prediction to a pixel box and confidence.

    The default ``exp`` mode inverts the log-ratio size targets; ``additive``
    treats ``t_w, t_h`` as pixel offsets from the anchor.
    """
    g = raw.grid
    gh, gw, na = g.shape[1:4]
    row, col = cell
    if not (0 <= row < gh and 0 <= col < gw and 0 <= anchor_index < na):
        raise IndexError(f"cell {cell} / anchor {anchor_index} outside grid {gh}x{gw}x{na}")
    tx, ty, tw, th, to = (float(v) for v in g[batch_index, row, col, anchor_index].detach().cpu().tolist())
    wa, ha = raw.anchors[anchor_index]
    cx = (col + _sigmoid(tx)) * raw.stride
    cy = (row + _sigmoid(ty)) * raw.stride
    if raw.decode_mode == "additive":
        w, h = max(wa + tw, 1e-6), max(ha + th, 1e-6)
    else:
        w, h = wa * math.exp(min(tw, 50.0)), ha * math.exp(min(th, 50.0))
    return Box(cx, cy, w, h), _sigmoid(to)


def predict(raw: HeadOutput, batch_index: int = 0) -> tuple[Box, float]:
    """Decode the highest-confidence (cell, anchor); ties go to the lowest (row, col, anchor)."""
    logits = raw.grid[batch_index, ..., 4].detach().cpu().numpy()
    # argmax on logits, not sigmoid: float32 sigmoid saturates and would reorder ties
    flat = int(np.argmax(logits.reshape(-1)))
    row, col, a = np.unravel_index(flat, logits.shape)
    return decode(raw, (int(row), int(col)), int(a), batch_index)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: EDGeoModel, path: str | Path, config: dict[str, Any], seed: int,
                    extra: dict[str, Any] | None = None) -> Path:
    """Write a zip archive: ``manifest.json`` plus one little-endian float32 blob per tensor."""
    path = Path(path)
    tensors = []
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for key, value in model.state_dict().items():
            arr = value.detach().cpu().numpy().astype("<f4")
            name = f"tensors/{key}.bin"
            zf.writestr(name, arr.tobytes(order="C"))
            tensors.append({"key": key, "shape": list(arr.shape), "dtype": "float32-le", "file": name})
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": seed,
            "config": config,
            "anchors": [list(a) for a in model.cfg.anchors],
            "tensors": tensors,
            "extra": extra or {},
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')} v{manifest.get('version')}")
        state = {}
        for t in manifest["tensors"]:
            arr = np.frombuffer(zf.read(t["file"]), dtype="<f4").reshape(t["shape"])
            state[t["key"]] = torch.from_numpy(arr.copy())
    return manifest, state


def load_state(model: EDGeoModel, state: dict[str, torch.Tensor]) -> EDGeoModel:
    own = model.state_dict()
    missing = set(own) ^ set(state)
    if missing:
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    model.load_state_dict({k: state[k].to(v.dtype) for k, v in own.items()})
    return model
