"""Blind-spot convolutional primitives, the BSA block, and gradient probing.

The structural rule throughout: a centrally masked k x k conv leaves the
own-frame dependency footprint with at least one odd coordinate, and every
following conv uses dilation >= 2 (even offsets), so the footprint can never
fold back onto the center pixel. probe_dependency certifies the property on
the assembled network rather than trusting the derivation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ACTIVATIONS = ("relu", "leaky_relu")


@dataclass
class BlindSpotLayerConfig:
    """Hyperparameters of the blind-spot propagation cell."""

    channels: int = 48
    masked_kernel: int = 3
    dilation: int = 2
    num_dconv_blocks: int = 3
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.masked_kernel % 2 == 0 or self.masked_kernel < 3:
            raise ValueError(f"masked_kernel must be odd and >= 3, got {self.masked_kernel}")
        if self.dilation < 2:
            raise ValueError("dilation must be >= 2 after a masked conv")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


def make_activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(0.1)
    raise ValueError(f"unknown activation {name!r}")


def _shrink_recurrent_output(conv: nn.Conv2d, gain: float = 0.25) -> None:
    # the cell output feeds back through the next frame's warp; a sub-unit
    # initial gain keeps the recurrence from amplifying before training
    with torch.no_grad():
        conv.weight.mul_(gain)
        conv.bias.zero_()


class MaskedConv2d(nn.Module):
    """k x k convolution whose center tap does not exist.

    The parameter tensor holds k*k - 1 taps and is scattered into a full
    kernel with a structurally zero center at each forward, so output(i)
    cannot depend on input(i) for any parameter values.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, dilation: int = 1, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        n_taps = kernel_size * kernel_size - 1
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, n_taps))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        center = (kernel_size * kernel_size) // 2
        idx = [i for i in range(kernel_size * kernel_size) if i != center]
        self.register_buffer("_tap_index", torch.tensor(idx, dtype=torch.long))
        fan_in = in_channels * n_taps
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(self.weight, -math.sqrt(3.0) * bound, math.sqrt(3.0) * bound)
        if bias:
            nn.init.uniform_(self.bias, -bound, bound)

    def full_kernel(self) -> torch.Tensor:
        k = self.kernel_size
        kernel = self.weight.new_zeros(self.out_channels, self.in_channels, k * k)
        kernel.index_copy_(2, self._tap_index, self.weight)
        return kernel.view(self.out_channels, self.in_channels, k, k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pad = self.dilation * (self.kernel_size // 2)
        return F.conv2d(x, self.full_kernel(), self.bias, padding=pad, dilation=self.dilation)

    def extra_repr(self) -> str:
        return f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, dilation={self.dilation}"


class DilatedConvBlock(nn.Module):
    """Dilated conv -> activation -> 1x1 conv, the BSA's receptive-field unit."""

    def __init__(self, channels: int, dilation: int, activation: str):
        super().__init__()
        self.dconv = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.act = make_activation(activation)
        self.pointwise = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.act(self.dconv(x)))


class BSABlock(nn.Module):
    """Blind-spot alignment cell fusing the current frame with warped features.

    Dataflow: concat(y_t, h) -> masked conv -> dilated conv blocks ->
    concat with h -> exit block -> hidden state. The exit block is a
    center-masked dilation-2 conv plus a parallel 1x1 conv over the same
    concat: the 1x1 branch restores access to the co-located aligned feature
    (which carries no current-frame noise) while the own-frame footprint
    stays off-center.
    """

    def __init__(self, in_channels: int, config: BlindSpotLayerConfig):
        super().__init__()
        self.config = config
        f = config.channels
        self.entry = MaskedConv2d(in_channels + f, f, config.masked_kernel, dilation=1)
        self.act = make_activation(config.activation)
        self.blocks = nn.ModuleList(
            DilatedConvBlock(f, config.dilation, config.activation) for _ in range(config.num_dconv_blocks)
        )
        self.exit_masked = MaskedConv2d(2 * f, f, config.masked_kernel, dilation=config.dilation)
        self.exit_pointwise = nn.Conv2d(2 * f, f, 1)
        self.out_proj = nn.Conv2d(f, f, 1)
        _shrink_recurrent_output(self.out_proj)

    def forward(self, y: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        u = self.act(self.entry(torch.cat([y, h], dim=1)))
        for block in self.blocks:
            u = block(u)
        v = torch.cat([u, h], dim=1)
        z = self.act(self.exit_masked(v) + self.exit_pointwise(v))
        return self.out_proj(z)


class PlainBlindCell(nn.Module):
    """Ablation cell without the BSA exit stage.

    The warped features enter only through the entry masked conv, so the
    co-located aligned feature is unreachable -- exactly the capacity the
    BSA block adds back.
    """

    def __init__(self, in_channels: int, config: BlindSpotLayerConfig):
        super().__init__()
        self.config = config
        f = config.channels
        self.entry = MaskedConv2d(in_channels + f, f, config.masked_kernel, dilation=1)
        self.act = make_activation(config.activation)
        self.blocks = nn.ModuleList(
            DilatedConvBlock(f, config.dilation, config.activation) for _ in range(config.num_dconv_blocks)
        )
        self.out_proj = nn.Conv2d(f, f, 1)
        _shrink_recurrent_output(self.out_proj)

    def forward(self, y: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        u = self.act(self.entry(torch.cat([y, h], dim=1)))
        for block in self.blocks:
            u = block(u)
        return self.out_proj(u)


@dataclass
class DependencyMap:
    """Which input pixels of one frame influence a probed output pixel."""

    magnitudes: np.ndarray
    probe_location: tuple[int, int, int]
    source_frame: int

    @property
    def center_magnitude(self) -> float:
        _, y, x = self.probe_location
        return float(self.magnitudes[y, x])

    def support(self, tol: float = 0.0) -> np.ndarray:
        return self.magnitudes > tol


def probe_dependency(model, frames, probe: tuple[int, int, int]) -> list[DependencyMap]:
    """Backpropagate from one output pixel and map its input dependencies.

    model : a differentiable callable mapping (T, C, H, W) -> (T, C', H, W)
    frames : VideoSequence or T x H x W x C array
    probe : (t0, y0, x0)

    Returns one DependencyMap per input frame; magnitudes are
    max over output channels of |d out(t0, y0, x0, c) / d input|, summed
    over input channels.
    """
    arr = getattr(frames, "frames", frames)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"frames must be T x H x W x C, got {arr.shape}")
    t0, y0, x0 = probe
    t, h, w, _ = arr.shape
    if not (0 <= t0 < t and 0 <= y0 < h and 0 <= x0 < w):
        raise ValueError(f"probe {probe} out of bounds for {arr.shape}")

    x = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().requires_grad_(True)
    out = model(x)
    if not out.requires_grad:
        raise TypeError("model is not differentiable (output carries no grad)")
    mags = torch.zeros(t, h, w)
    for c in range(out.shape[1]):
        (g,) = torch.autograd.grad(out[t0, c, y0, x0], x, retain_graph=True, allow_unused=True)
        if g is None:
            continue
        mags = torch.maximum(mags, g.abs().sum(dim=1))
    return [
        DependencyMap(magnitudes=mags[k].numpy(), probe_location=(t0, y0, x0), source_frame=k)
        for k in range(t)
    ]
