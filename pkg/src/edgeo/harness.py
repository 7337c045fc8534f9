"""Training, evaluation and the experiment protocols.

Every CSV written here formats floats with ``repr`` (shortest round-trip),
so identical configs and seeds reproduce identical bytes. Wall-clock
timings never go into CSVs; they land in JSON sidecars.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from . import config as config_mod
from .geometry import AnchorSet, Box, MarkingPoint, acc_at_k, cluster_anchors, iou
from .loss import total_loss
from .network import (
    BackboneSpec,
    EDGeoModel,
    HeadOutput,
    ModelConfig,
    assign,
    load_state,
    predict,
    read_checkpoint,
    save_checkpoint,
)
from .posenc import ExternalMaskProvider, SyntheticMaskProvider, kpe, mask_encoding
from .synthdata import Sample, SceneConfig, generate_dataset, read_dataset

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.edgeo"


class TrainingDiverged(RuntimeError):
    pass


# -- small IO helpers ----------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())
    return path


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def make_run_dir(root: str | Path, cfg: dict[str, Any], name: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run = Path(root) / f"{name}-{config_mod.config_hash(cfg)}-{stamp}"
    run.mkdir(parents=True, exist_ok=False)
    atomic_write(run / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return run


# -- config -> objects ---------------------------------------------------------

def scene_config(cfg: dict[str, Any]) -> SceneConfig:
    d = {k: v for k, v in cfg["data"].items() if k in SceneConfig.__dataclass_fields__}
    return SceneConfig.from_dict(d)


def load_datasets(cfg: dict[str, Any]) -> tuple[list[Sample], list[Sample]]:
    """Read ``data.train_dir``/``data.val_dir`` if set, else generate disjoint index ranges."""
    d = cfg["data"]
    scene = scene_config(cfg)
    train = read_dataset(d["train_dir"]) if d["train_dir"] else generate_dataset(scene, d["n_train"])
    if d["val_dir"]:
        val = read_dataset(d["val_dir"])
    else:
        val = generate_dataset(scene, d["n_val"], start=d["n_train"])
    return train, val


def resolve_anchors(cfg: dict[str, Any], samples: Sequence[Sample]) -> AnchorSet:
    spec = cfg["model"]["anchors"]
    if spec != "auto":
        return AnchorSet(spec)
    k = cfg["model"]["n_anchors"]
    wh = np.array([[s.gt_box.w, s.gt_box.h] for s in samples], dtype=np.float64)
    if len(wh) < k:
        wh = np.resize(wh, (k, 2))
    return cluster_anchors(wh, k, seed=cfg["train"]["seed"])


def model_config(cfg: dict[str, Any], anchors: AnchorSet) -> ModelConfig:
    m = cfg["model"]
    spec = BackboneSpec(
        name=m["backbone"],
        downsample_factor=m["downsample_factor"],
        out_channels=m["out_channels"],
        widths=tuple(m["widths"]),
        nonlinearity=m["nonlinearity"],
    )
    return ModelConfig(
        backbone=spec,
        anchors=anchors,
        cem_enabled=cfg["cem"]["enabled"],
        kernel_length=cfg["cem"]["kernel_length"],
        cem_nonlinearity=cfg["cem"]["nonlinearity"],
        decode_mode=m["decode"],
        seed=cfg["train"]["seed"],
    )


def build_model(cfg: dict[str, Any], anchors: AnchorSet) -> EDGeoModel:
    return EDGeoModel(model_config(cfg, anchors))


def load_model(checkpoint: str | Path) -> tuple[EDGeoModel, dict[str, Any]]:
    manifest, state = read_checkpoint(checkpoint)
    model = build_model(manifest["config"], AnchorSet(manifest["anchors"]))
    load_state(model, state)
    model.eval()
    return model, manifest


# -- encodings and tensors -----------------------------------------------------

def encoding_field(sample: Sample, point: MarkingPoint, cfg: dict[str, Any]) -> np.ndarray:
    p = cfg["posenc"]
    _, h, w = sample.query_image.shape
    if p["mode"] == "kpe":
        return kpe(h, w, point)
    if p["provider"] == "synthetic":
        if sample.mask is None:
            raise ValueError("synthetic mask provider needs a ground-truth mask in the sample")
        provider = SyntheticMaskProvider(sample.mask)
    else:
        provider = ExternalMaskProvider(p["command"])
    return mask_encoding(sample.query_float, point, provider, p["alpha_min"], p["alpha_max"],
                         fallback=p["fallback_to_kpe"])


@dataclass
class Prepared:
    query: torch.Tensor
    encoding: torch.Tensor
    reference: torch.Tensor
    boxes: list[Box]

    def __len__(self):
        return len(self.boxes)


def prepare(samples: Sequence[Sample], cfg: dict[str, Any], points: Sequence[MarkingPoint] | None = None) -> Prepared:
    if not samples:
        raise ValueError("empty dataset")
    points = points if points is not None else [s.point for s in samples]
    q = np.stack([s.query_float for s in samples])
    r = np.stack([s.reference_float for s in samples])
    e = np.stack([encoding_field(s, p, cfg) for s, p in zip(samples, points)])[:, None]
    return Prepared(torch.from_numpy(q), torch.from_numpy(e.astype(np.float32)), torch.from_numpy(r),
                    [s.gt_box for s in samples])


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EDGeoModel
    checkpoint: Path
    anchors: AnchorSet
    final_loss: float
    loss_rows: list[tuple] = field(repr=False, default_factory=list)


def _optimizer(model: EDGeoModel, t: dict[str, Any]) -> torch.optim.Optimizer:
    return torch.optim.RMSprop(model.parameters(), lr=t["lr"], alpha=t["rmsprop_alpha"],
                               momentum=t["momentum"], weight_decay=t["weight_decay"])


def _scheduler(opt: torch.optim.Optimizer, kind: str, total_steps: int) -> torch.optim.lr_scheduler.LRScheduler:
    """Per-step multiplier on the initial rate: flat, or a half cosine down to zero."""
    if kind == "cosine":
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total_steps) / total_steps)))
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)


def _dihedral(x: torch.Tensor, code: int) -> torch.Tensor:
    """Apply one of the 8 square symmetries to the trailing two dims."""
    if code & 4:
        x = x.transpose(-1, -2)
    if code & 1:
        x = x.flip(-1)
    if code & 2:
        x = x.flip(-2)
    return x


def _dihedral_box(b: Box, code: int, width: float, height: float) -> Box:
    cx, cy, w, h = b.cx, b.cy, b.w, b.h
    if code & 4:
        cx, cy, w, h = cy, cx, h, w
        width, height = height, width
    if code & 1:
        cx = width - cx
    if code & 2:
        cy = height - cy
    return Box(cx, cy, w, h)


def augment_batch(q: torch.Tensor, e: torch.Tensor, r: torch.Tensor, boxes: Sequence[Box],
                  rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[Box]]:
    """Joint RGB permutation of both views, independent square symmetries of each view.

    Colours stay matched across views, object masks and encodings move with
    the query, and boxes move with the reference.
    """
    qs, es, rs, bs = [], [], [], []
    hr, wr = r.shape[-2:]
    for i in range(q.shape[0]):
        perm = torch.from_numpy(rng.permutation(3))
        cq, cr = int(rng.integers(8)), int(rng.integers(8))
        if q.shape[-1] != q.shape[-2]:
            cq &= 3
        if hr != wr:
            cr &= 3
        qs.append(_dihedral(q[i, perm], cq))
        es.append(_dihedral(e[i], cq))
        rs.append(_dihedral(r[i, perm], cr))
        bs.append(_dihedral_box(boxes[i], cr, wr, hr))
    return torch.stack(qs), torch.stack(es), torch.stack(rs), bs


def train(samples: Sequence[Sample], cfg: dict[str, Any], run_dir: str | Path) -> TrainResult:
    """Fit a model; writes ``losses.csv``, periodic and final checkpoints into ``run_dir``."""
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    t = cfg["train"]
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(t["threads"])
    started = time.perf_counter()

    anchors = resolve_anchors(cfg, samples)
    model = build_model(cfg, anchors)
    model.train()
    opt = _optimizer(model, t)
    data = prepare(samples, cfg)
    total_steps = t["epochs"] * math.ceil(len(data) / t["batch_size"])
    sched = _scheduler(opt, t["lr_schedule"], total_steps)
    _, hr, wr = samples[0].reference_image.shape
    grid = (hr // model.stride, wr // model.stride)
    assignments = [assign(b, anchors, grid, model.stride) for b in data.boxes]

    rng = np.random.Generator(np.random.PCG64(t["seed"]))
    aug_rng = np.random.Generator(np.random.PCG64([t["seed"], 1]))
    bs = t["batch_size"]
    rows: list[tuple] = []
    step = 0
    for epoch in range(1, t["epochs"] + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(order), bs):
            idx = torch.from_numpy(order[start : start + bs])
            q, e, r = data.query[idx], data.encoding[idx], data.reference[idx]
            if t["augment"]:
                q, e, r, boxes = augment_batch(q, e, r, [data.boxes[i] for i in idx.tolist()], aug_rng)
                batch_assign = [assign(b, anchors, grid, model.stride) for b in boxes]
            else:
                batch_assign = [assignments[i] for i in idx.tolist()]
            out = model(q, e, r)
            lb = total_loss(out, batch_assign, anchors,
                            neg_weight=t["neg_weight"], reduction=t["reduction"])
            if not torch.isfinite(lb.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            if t["grad_clip"]:
                torch.nn.utils.clip_grad_norm_(model.parameters(), t["grad_clip"])
            opt.step()
            sched.step()
            step += 1
            rows.append((epoch, step, *lb.items()))
        if t["checkpoint_every"] and epoch % t["checkpoint_every"] == 0 and epoch != t["epochs"]:
            save_checkpoint(model, run_dir / f"checkpoint-epoch{epoch:03d}.edgeo", cfg, t["seed"])

    write_csv(run_dir / "losses.csv", ("epoch", "step", "geo", "cls", "total"), rows)
    ckpt = save_checkpoint(model, run_dir / CHECKPOINT_NAME, cfg, t["seed"])
    atomic_write(run_dir / "train_timing.json",
                 json.dumps({"seconds": time.perf_counter() - started, "steps": step}) + "\n")
    model.eval()
    return TrainResult(model, ckpt, anchors, rows[-1][-1], rows)


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    split: str
    accuracy: dict[float, float]
    ious: list[float]
    predictions: list[Box]
    confidences: list[float]
    runtime: float

    @property
    def acc25(self) -> float:
        return self.accuracy[0.25]

    @property
    def acc50(self) -> float:
        return self.accuracy[0.5]


@torch.no_grad()
def run_model(model: EDGeoModel, data: Prepared, batch_size: int) -> tuple[list[Box], list[float], list[np.ndarray]]:
    model.eval()
    boxes, confs, attns = [], [], []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        out = model(data.query[sl], data.encoding[sl], data.reference[sl])
        for i in range(out.grid.shape[0]):
            b, c = predict(out, i)
            boxes.append(b)
            confs.append(c)
            attns.append(out.attention[i].numpy())
    return boxes, confs, attns


def evaluate(samples: Sequence[Sample], model: EDGeoModel | str | Path, cfg: dict[str, Any] | None = None,
             points: Sequence[MarkingPoint] | None = None, split: str = "eval") -> EvalReport:
    """acc@k of top-1 predictions; ``cfg`` defaults to the checkpoint's config snapshot."""
    if not isinstance(model, EDGeoModel):
        model, manifest = load_model(model)
        cfg = cfg or manifest["config"]
    if cfg is None:
        raise ValueError("cfg is required when passing a live model")
    started = time.perf_counter()
    data = prepare(samples, cfg, points)
    preds, confs, _ = run_model(model, data, cfg["train"]["eval_batch_size"])
    thresholds = sorted(set(cfg["train"]["eval_thresholds"]) | {0.25, 0.5})
    acc = {k: acc_at_k(preds, data.boxes, k) for k in thresholds}
    ious = [iou(p, t) for p, t in zip(preds, data.boxes)]
    return EvalReport(split, acc, ious, preds, confs, time.perf_counter() - started)


def write_eval(report: EvalReport, path: str | Path) -> Path:
    header = ["threshold", "accuracy"]
    rows = [(k, v) for k, v in sorted(report.accuracy.items())]
    write_csv(path, header, rows)
    write_csv(Path(path).with_name(Path(path).stem + "_ious.csv"), ["index", "iou", "confidence"],
              [(i, u, c) for i, (u, c) in enumerate(zip(report.ious, report.confidences))])
    return Path(path)


# -- robustness ------------------------------------------------------------------

def shift_point(p: MarkingPoint, mask, d: float, rng: np.random.Generator, retries: int) -> tuple[MarkingPoint, bool]:
    """Displace ``p`` by ``d`` pixels in a uniform direction, staying on ``mask``.

    Directions are redrawn up to ``retries`` times. If none lands on the mask,
    the point moves to the farthest on-mask position along the first
    direction (possibly ``p`` itself). Returns the point and whether that
    clamp was used.
    """
    if d == 0:
        return p, False
    first = None
    for _ in range(retries):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        first = theta if first is None else first
        q = MarkingPoint(float(round(p.x + d * math.cos(theta))), float(round(p.y + d * math.sin(theta))))
        if mask.contains(q):
            return q, False
    for t in np.arange(d, 0.0, -0.5):
        q = MarkingPoint(float(round(p.x + t * math.cos(first))), float(round(p.y + t * math.sin(first))))
        if mask.contains(q):
            return q, True
    return p, True


def shifted_points(samples: Sequence[Sample], d: float, seed: int, retries: int) -> tuple[list[MarkingPoint], int]:
    pts, clamped = [], 0
    for i, s in enumerate(samples):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7919, i, int(round(d * 1000))])))
        q, c = shift_point(s.point, s.mask, d, rng, retries)
        pts.append(q)
        clamped += c
    return pts, clamped


ROBUSTNESS_HEADER = ("shift", "kpe_acc@0.25", "kpe_acc@0.5", "mpe_acc@0.25", "mpe_acc@0.5",
                     "clamped", "off_mask_points", "mpe_foreground_identical")


def robustness_sweep(samples: Sequence[Sample], kpe_model: str | Path | EDGeoModel, mpe_model: str | Path | EDGeoModel,
                     shifts: Sequence[float], cfg: dict[str, Any], out_dir: str | Path | None = None) -> list[tuple]:
    """Evaluate both models on identical shifted marking points.

    The MPE side uses the oracle mask provider, so any change in its encoding
    comes from the background field only; the foreground audit checks this.
    """
    models = {}
    for name, m in (("kpe", kpe_model), ("mpe", mpe_model)):
        if isinstance(m, EDGeoModel):
            models[name] = (m, cfg)
        else:
            model, manifest = load_model(m)
            models[name] = (model, manifest["config"])
    mode_cfgs = {}
    for name, (_, mcfg) in models.items():
        c = json.loads(json.dumps(mcfg))
        c["posenc"]["mode"] = name
        c["posenc"]["provider"] = "synthetic"
        mode_cfgs[name] = c

    exp = cfg["experiment"]
    base_fg = [None] * len(samples)
    rows = []
    for d in shifts:
        pts, clamped = shifted_points(samples, d, cfg["train"]["seed"], exp["shift_retries"])
        off = sum(1 for s, p in zip(samples, pts) if not s.mask.contains(p))
        if off:
            raise RuntimeError(f"robustness audit: {off} shifted points fell off the object mask at d={d}")
        identical = True
        for i, (s, p) in enumerate(zip(samples, pts)):
            fg = encoding_field(s, p, mode_cfgs["mpe"])[s.mask.values.astype(bool)]
            if base_fg[i] is None:
                base_fg[i] = fg
            identical &= bool(np.array_equal(fg, base_fg[i]))
        reports = {name: evaluate(samples, models[name][0], mode_cfgs[name], pts, split=f"shift{d}")
                   for name in ("kpe", "mpe")}
        rows.append((d, reports["kpe"].acc25, reports["kpe"].acc50, reports["mpe"].acc25, reports["mpe"].acc50,
                     clamped, off, identical))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(out_dir / "robustness.csv", ROBUSTNESS_HEADER, rows)
        plot_robustness(rows, out_dir / "robustness.png")
    return rows


def plot_robustness(rows: Sequence[tuple], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.plot(d, [r[1] for r in rows], "o--", color="tab:blue", label="KPE acc@0.25")
    ax.plot(d, [r[2] for r in rows], "o-", color="tab:blue", label="KPE acc@0.5")
    ax.plot(d, [r[3] for r in rows], "s--", color="tab:red", label="MPE acc@0.25")
    ax.plot(d, [r[4] for r in rows], "s-", color="tab:red", label="MPE acc@0.5")
    ax.set_xlabel("marking-point shift (px)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    tmp = Path(path).with_name(Path(path).name + ".tmp.png")
    fig.savefig(tmp, metadata={"Software": None})
    plt.close(fig)
    tmp.replace(path)


# -- ablation and kernel sweep ------------------------------------------------------

ABLATION_HEADER = ("mpe", "cem", "acc@0.25", "acc@0.5")
ABLATION_GRID = ((True, True), (True, False), (False, True), (False, False))


def _variant(cfg: dict[str, Any], **dotted: Any) -> dict[str, Any]:
    c = json.loads(json.dumps(cfg))
    for key, value in dotted.items():
        config_mod.set_key(c, key.replace("__", "."), value)
    return c


def _split(cfg: dict[str, Any], train_set, val_set):
    return train_set if cfg["experiment"]["split"] == "train" else val_set


def ablation(train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: dict[str, Any], out_dir: str | Path) -> list[tuple]:
    out_dir = Path(out_dir)
    rows, timing = [], {}
    for use_mpe, use_cem in ABLATION_GRID:
        c = _variant(cfg, posenc__mode="mpe" if use_mpe else "kpe", cem__enabled=use_cem)
        tag = f"{'mpe' if use_mpe else 'kpe'}_{'cem' if use_cem else 'nocem'}"
        t0 = time.perf_counter()
        res = train(train_set, c, out_dir / tag)
        rep = evaluate(_split(cfg, train_set, val_set), res.model, c)
        timing[tag] = time.perf_counter() - t0
        rows.append((use_mpe, use_cem, rep.acc25, rep.acc50))
    write_csv(out_dir / "ablation.csv", ABLATION_HEADER, rows)
    atomic_write(out_dir / "ablation_timing.json", json.dumps(timing, indent=2) + "\n")
    return rows


KERNEL_HEADER = ("kernel_length", "acc@0.25", "acc@0.5")


def kernel_sweep(train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: dict[str, Any], out_dir: str | Path,
                 kernel_sizes: Sequence[int] | None = None) -> tuple[list[tuple], dict[int, float]]:
    out_dir = Path(out_dir)
    ks = list(kernel_sizes or cfg["experiment"]["kernel_sizes"])
    rows, timing = [], {}
    for k in ks:
        c = _variant(cfg, cem__enabled=True, cem__kernel_length=k)
        t0 = time.perf_counter()
        res = train(train_set, c, out_dir / f"k{k}")
        rep = evaluate(_split(cfg, train_set, val_set), res.model, c)
        timing[k] = time.perf_counter() - t0
        rows.append((k, rep.acc25, rep.acc50))
    write_csv(out_dir / "kernel_sweep.csv", KERNEL_HEADER, rows)
    atomic_write(out_dir / "kernel_sweep_timing.json", json.dumps({str(k): v for k, v in timing.items()}, indent=2) + "\n")
    return rows, timing


# -- attention export ----------------------------------------------------------------

def _colormap(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return (colormaps["jet"](np.clip(values, 0, 1))[..., :3] * 255).astype(np.float64)


def _blend(image_chw: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    base = image_chw.transpose(1, 2, 0).astype(np.float64)
    return np.clip(np.rint((1 - alpha) * base + alpha * _colormap(heat)), 0, 255).astype(np.uint8)


@torch.no_grad()
def export_attention(sample: Sample, model: EDGeoModel | str | Path, out_dir: str | Path, cfg: dict[str, Any] | None = None,
                     point: MarkingPoint | None = None, tag: str = "") -> dict[str, Any]:
    """Write the fusion attention overlay on the reference and the encoding overlay on the query."""
    from PIL import Image

    if not isinstance(model, EDGeoModel):
        model, manifest = load_model(model)
        cfg = cfg or manifest["config"]
    if cfg is None:
        raise ValueError("cfg is required when passing a live model")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    point = point or sample.point
    enc = encoding_field(sample, point, cfg)
    data = Prepared(torch.from_numpy(sample.query_float[None]), torch.from_numpy(enc[None, None]),
                    torch.from_numpy(sample.reference_float[None]), [sample.gt_box])
    model.eval()
    out: HeadOutput = model(data.query, data.encoding, data.reference)
    attn = out.attention[0].numpy().astype(np.float64)
    _, hr, wr = sample.reference_image.shape
    up = np.kron(attn, np.ones((hr // attn.shape[0], wr // attn.shape[1])))
    span = up.max() - up.min()
    heat = (up - up.min()) / span if span > 0 else np.zeros_like(up)

    sid = f"{sample.meta.get('index', 0):06d}"
    stem = f"{sid}_{cfg['posenc']['mode']}_{'cem' if cfg['cem']['enabled'] else 'nocem'}_k{cfg['cem']['kernel_length']}"
    stem += f"_{tag}" if tag else ""
    paths = {"attention": out_dir / f"{stem}_attention.png", "encoding": out_dir / f"{stem}_encoding.png"}
    Image.fromarray(_blend(sample.reference_image, heat)).save(paths["attention"])
    Image.fromarray(_blend(sample.query_image, enc)).save(paths["encoding"])
    return {"paths": paths, "attention": attn, "encoding": enc}
