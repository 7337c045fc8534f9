import numpy as np
import pytest

from edgeo import config


def raster_iou(a, b):
    """Pixel-count IoU for boxes with integer corners (rasterised on a unit grid)."""
    boxes = [tuple(int(round(v)) for v in box.corners()) for box in (a, b)]
    x1 = min(bx[0] for bx in boxes)
    y1 = min(bx[1] for bx in boxes)
    x2 = max(bx[2] for bx in boxes)
    y2 = max(bx[3] for bx in boxes)
    grids = []
    for l, t, r, btm in boxes:
        g = np.zeros((y2 - y1, x2 - x1), dtype=bool)
        g[t - y1 : btm - y1, l - x1 : r - x1] = True
        grids.append(g)
    inter = np.logical_and(*grids).sum()
    union = np.logical_or(*grids).sum()
    return inter / union


@pytest.fixture
def tiny_cfg():
    """Small images and narrow widths so harness tests run in seconds."""
    return config.load(None, [
        "data.query_size=[64, 64]",
        "data.reference_size=[128, 128]",
        "data.side_range=[12.0, 24.0]",
        "data.n_objects=4",
        "data.center_jitter=8.0",
        "data.n_train=8",
        "data.n_val=4",
        "model.widths=[8, 8, 16, 16]",
        "model.out_channels=16",
        "train.epochs=2",
        "train.batch_size=4",
    ])


def tiny_model(cem=True, k=5, seed=0, widths=(4, 4, 8, 8), out=8, anchors=None):
    from edgeo.geometry import AnchorSet
    from edgeo.network import BackboneSpec, EDGeoModel, ModelConfig

    anchors = anchors or AnchorSet([(8 + 4 * i, 12 + 3 * i) for i in range(9)])
    spec = BackboneSpec(downsample_factor=2 ** len(widths), out_channels=out, widths=tuple(widths))
    return EDGeoModel(ModelConfig(backbone=spec, anchors=anchors, cem_enabled=cem, kernel_length=k, seed=seed))


def finite_difference_errors(model, loss_fn, n_params, seed=0, eps=1e-5):
    """Relative errors between autograd and central differences on sampled scalar parameters.

    The denominator has a 1e-8 floor so parameters with a vanishing gradient
    compare in absolute terms.
    """
    import torch

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    with torch.no_grad():
        for fid in flat_ids:
            j = int(np.searchsorted(offsets, fid, side="right") - 1)
            p, i = params[j], int(fid - offsets[j])
            flat = p.view(-1)
            old = flat[i].item()
            flat[i] = old + eps
            lp = loss_fn().item()
            flat[i] = old - eps
            lm = loss_fn().item()
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            an = p.grad.view(-1)[i].item()
            errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return np.array(errors)
