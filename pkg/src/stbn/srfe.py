"""Spatial receptive field expansion: patch-unshuffle, residual fusion, patch-shuffle.

Safety discipline: the propagation cells leave the own-frame dependency
footprint on offsets with at least one odd coordinate, so this stage may only
add even offsets. Residual convs therefore run phase-grouped on the
unshuffled grid (same-phase taps move in steps of ``shuffle_factor``), with
dilation 2 whenever the factor is odd, and cross-phase mixing happens only in
1x1 convs. A construction-time gradient self-check in the assembled model
rejects any configuration that leaks anyway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blindspot import make_activation

HEADS = ("regression", "gaussian_params")


@dataclass
class SRFEConfig:
    shuffle_factor: int = 2
    num_residual_blocks: int = 4
    channels: int = 64
    head: str = "gaussian_params"

    def __post_init__(self):
        if self.shuffle_factor < 1:
            raise ValueError("shuffle_factor must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        groups = self.shuffle_factor**2
        if self.channels % groups != 0:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by shuffle_factor^2 ({groups})"
            )


def patch_unshuffle(x: np.ndarray, s: int) -> np.ndarray:
    """Space-to-channel rearrangement of an H x W x C array.

    Output channel (py*s + px)*C + c holds the (py, px) subgrid of input
    channel c (row-major within the s x s cell). Exact inverse of
    :func:`patch_shuffle`.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected H x W x C, got {x.shape}")
    h, w, c = x.shape
    if h % s or w % s:
        raise ValueError(f"shape {h}x{w} not divisible by s={s}")
    y = x.reshape(h // s, s, w // s, s, c)
    y = y.transpose(0, 2, 1, 3, 4)
    return y.reshape(h // s, w // s, s * s * c)


def patch_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    """Channel-to-space inverse of :func:`patch_unshuffle`."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected h x w x C, got {x.shape}")
    h, w, cs = x.shape
    if cs % (s * s):
        raise ValueError(f"channel count {cs} not divisible by s^2={s * s}")
    c = cs // (s * s)
    y = x.reshape(h, w, s, s, c)
    y = y.transpose(0, 2, 1, 3, 4)
    return y.reshape(h * s, w * s, c)


def patch_unshuffle_t(x: torch.Tensor, s: int) -> torch.Tensor:
    """Torch variant on (B, C, H, W); phase-major channel layout."""
    b, c, h, w = x.shape
    if h % s or w % s:
        raise ValueError(f"shape {h}x{w} not divisible by s={s}")
    y = x.view(b, c, h // s, s, w // s, s)
    y = y.permute(0, 3, 5, 1, 2, 4).contiguous()
    return y.view(b, s * s * c, h // s, w // s)


def patch_shuffle_t(x: torch.Tensor, s: int) -> torch.Tensor:
    b, cs, h, w = x.shape
    if cs % (s * s):
        raise ValueError(f"channel count {cs} not divisible by s^2={s * s}")
    c = cs // (s * s)
    y = x.view(b, s, s, c, h, w)
    y = y.permute(0, 3, 4, 1, 5, 2).contiguous()
    return y.view(b, c, h * s, w * s)


class _GroupedResidualBlock(nn.Module):
    def __init__(self, channels: int, groups: int, dilation: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation, groups=groups)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation, groups=groups)
        self.act = make_activation(activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class SRFE(nn.Module):
    """Fuse forward/backward states on the unshuffled grid and predict the frame.

    Output has C channels for the regression head and 2C (mean then
    log-variance) for the gaussian_params head.
    """

    def __init__(self, hidden_channels: int, image_channels: int, config: SRFEConfig, activation: str = "leaky_relu"):
        super().__init__()
        self.config = config
        s = config.shuffle_factor
        groups = s * s
        # same-phase coarse taps land on fine offsets s*dilation*k: keep them even
        coarse_dilation = 1 if s % 2 == 0 else 2
        trunk = config.channels
        per_phase = trunk // groups
        self.entry = nn.Conv2d(2 * hidden_channels * groups, trunk, 1, groups=groups)
        self.blocks = nn.Sequential(
            *(_GroupedResidualBlock(trunk, groups, coarse_dilation, activation) for _ in range(config.num_residual_blocks))
        )
        self.exit = nn.Conv2d(trunk, trunk, 1, groups=groups)
        self.out_channels = image_channels if config.head == "regression" else 2 * image_channels
        self.head = nn.Sequential(
            nn.Conv2d(per_phase, per_phase, 1),
            make_activation(activation),
            nn.Conv2d(per_phase, self.out_channels, 1),
        )
        final = self.head[-1]
        nn.init.normal_(final.weight, std=0.02)
        nn.init.zeros_(final.bias)

    def forward(self, h_f: torch.Tensor, h_b: torch.Tensor) -> torch.Tensor:
        if h_f.shape != h_b.shape:
            raise ValueError(f"state shapes differ: {tuple(h_f.shape)} vs {tuple(h_b.shape)}")
        s = self.config.shuffle_factor
        b, f, h, w = h_f.shape
        pad_h = (-h) % s
        pad_w = (-w) % s
        if pad_h or pad_w:
            h_f = F.pad(h_f, (0, pad_w, 0, pad_h), mode="reflect")
            h_b = F.pad(h_b, (0, pad_w, 0, pad_h), mode="reflect")
        uf = patch_unshuffle_t(h_f, s).view(b, s * s, f, h_f.shape[2] // s, h_f.shape[3] // s)
        ub = patch_unshuffle_t(h_b, s).view(b, s * s, f, h_f.shape[2] // s, h_f.shape[3] // s)
        u = torch.cat([uf, ub], dim=2).view(b, s * s * 2 * f, uf.shape[3], uf.shape[4])
        u = self.exit(self.blocks(self.entry(u)))
        fine = patch_shuffle_t(u, s)
        if pad_h or pad_w:
            fine = fine[:, :, :h, :w]
        return self.head(fine)


class PointwiseHead(nn.Module):
    """No-SRFE baseline: fuse the two states with 1x1 convs only."""

    def __init__(self, hidden_channels: int, image_channels: int, head: str = "gaussian_params", activation: str = "leaky_relu"):
        super().__init__()
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        self.out_channels = image_channels if head == "regression" else 2 * image_channels
        self.net = nn.Sequential(
            nn.Conv2d(2 * hidden_channels, hidden_channels, 1),
            make_activation(activation),
            nn.Conv2d(hidden_channels, self.out_channels, 1),
        )
        final = self.net[-1]
        nn.init.normal_(final.weight, std=0.02)
        nn.init.zeros_(final.bias)

    def forward(self, h_f: torch.Tensor, h_b: torch.Tensor) -> torch.Tensor:
        if h_f.shape != h_b.shape:
            raise ValueError(f"state shapes differ: {tuple(h_f.shape)} vs {tuple(h_b.shape)}")
        return self.net(torch.cat([h_f, h_b], dim=1))
