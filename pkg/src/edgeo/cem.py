"""Context enhancement with orthogonal strip convolutions.

    x' = conv1x1_in(x)
    h  = conv_1xk(x'),  v = conv_kx1(x')
    y  = conv1x1_out(cat[h, v])

No normalisation or activation sits between the stages unless
``nonlinearity`` is set, in which case it is applied to ``x'`` only.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_KERNEL = 11
SWEEP_KERNELS = (7, 9, 11, 13, 15, 17)

_ACTIVATIONS = {"relu": F.relu, "silu": F.silu, "gelu": F.gelu}


def _check_kernel(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"strip kernel length must be a positive odd integer, got {k}")


class ContextEnhancement(nn.Module):
    def __init__(self, channels: int, kernel_length: int = DEFAULT_KERNEL, nonlinearity: str | None = None):
        super().__init__()
        _check_kernel(kernel_length)
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if nonlinearity is not None and nonlinearity not in _ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.channels = channels
        self.kernel_length = kernel_length
        self.nonlinearity = nonlinearity
        pad = kernel_length // 2
        self.conv1_in = nn.Conv2d(channels, channels, 1)
        self.conv_h = nn.Conv2d(channels, channels, (1, kernel_length), padding=(0, pad))
        self.conv_v = nn.Conv2d(channels, channels, (kernel_length, 1), padding=(pad, 0))
        self.conv1_out = nn.Conv2d(2 * channels, channels, 1)

    def branches(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the horizontal and vertical strip responses before compression."""
        if x.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-3]}")
        mid = self.conv1_in(x)
        if self.nonlinearity is not None:
            mid = _ACTIVATIONS[self.nonlinearity](mid)
        return self.conv_h(mid), self.conv_v(mid)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, v = self.branches(x)
        return self.conv1_out(torch.cat([h, v], dim=-3))


def cem_init(channels: int, k: int = DEFAULT_KERNEL, seed: int = 0, nonlinearity: str | None = None,
             dtype: torch.dtype = torch.float32) -> ContextEnhancement:
    """Build a CEM with weights ``U(-sqrt(3/fan_in), sqrt(3/fan_in))`` and zero biases."""
    _check_kernel(k)
    module = ContextEnhancement(channels, k, nonlinearity).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in (module.conv1_in, module.conv_h, module.conv_v, module.conv1_out):
            fan_in = conv.weight[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
            conv.bias.zero_()
    return module


def cem_forward(f: torch.Tensor, params: ContextEnhancement) -> torch.Tensor:
    """Apply ``params`` to an unbatched (C, H, W) or batched (B, C, H, W) feature map."""
    if f.dim() == 3:
        return params(f.unsqueeze(0)).squeeze(0)
    return params(f)


def parameter_count(channels: int, k: int) -> int:
    c = channels
    return (c * c + c) + 2 * (c * c * k + c) + (2 * c * c + c)
