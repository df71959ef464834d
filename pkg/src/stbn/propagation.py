"""Bidirectional recurrent propagation of blind-spot states with flow alignment.

Each direction owns its cell parameters. Boundary states are zero-initialized,
and features are warped with nearest interpolation only -- anything else in
this path would corrupt the noise statistics the blind-spot losses rely on.
Memory stays linear in T: exactly one list of per-frame states per direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .blindspot import BlindSpotLayerConfig, BSABlock, PlainBlindCell
from .warp import FlowField, warp_tensor

FEATURE_INTERPOLATION = "nearest"


@dataclass
class BlindSpotState:
    """Recurrent hidden features for one frame, blind to that frame's own pixel."""

    features: np.ndarray
    direction: str
    frame_index: int


def _flows_to_tensor(flows: list[FlowField], t: int, h: int, w: int) -> torch.Tensor:
    if len(flows) != t - 1:
        raise ValueError(f"expected {t - 1} flows for {t} frames, got {len(flows)}")
    stack = np.stack([np.asarray(f.vectors, dtype=np.float32) for f in flows]) if flows else np.zeros((0, h, w, 2), np.float32)
    if flows and stack.shape[1:3] != (h, w):
        raise ValueError(f"flow shape {stack.shape[1:3]} does not match frames {(h, w)}")
    return torch.from_numpy(stack)


class BidirectionalPropagation(nn.Module):
    """Forward and backward blind-spot propagation over a frame sequence."""

    def __init__(self, image_channels: int, config: BlindSpotLayerConfig | None = None, use_bsa: bool = True):
        super().__init__()
        self.config = config or BlindSpotLayerConfig()
        cell_cls = BSABlock if use_bsa else PlainBlindCell
        self.forward_cell = cell_cls(image_channels, self.config)
        self.backward_cell = cell_cls(image_channels, self.config)
        self.interpolation = FEATURE_INTERPOLATION

    def _align(self, h: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        # bilinear here would be a bug, not a choice
        assert self.interpolation == "nearest", "features must be warped with nearest interpolation"
        return warp_tensor(h, flow, self.interpolation)

    def run_forward(self, y: torch.Tensor, flows: torch.Tensor | None) -> list[torch.Tensor]:
        """Forward pass over (B, T, C, H, W) frames with (T-1, ...) or (B, T-1, ...) flows.

        flows[j] aligns frame j's state onto frame j+1's grid. Returns T
        hidden states of shape (B, F, H, W).
        """
        b, t, _, h, w = y.shape
        flows = self._check_flows(flows, b, t, h, w)
        states: list[torch.Tensor] = []
        state = y.new_zeros(b, self.config.channels, h, w)
        for i in range(t):
            aligned = state if i == 0 else self._align(state, flows[:, i - 1])
            state = self.forward_cell(y[:, i], aligned)
            states.append(state)
        return states

    def run_backward(self, y: torch.Tensor, flows: torch.Tensor | None) -> list[torch.Tensor]:
        """Mirror of :meth:`run_forward`; flows[j] aligns frame j+1's state onto frame j."""
        b, t, _, h, w = y.shape
        flows = self._check_flows(flows, b, t, h, w)
        states: list[torch.Tensor] = [None] * t
        state = y.new_zeros(b, self.config.channels, h, w)
        for i in range(t - 1, -1, -1):
            aligned = state if i == t - 1 else self._align(state, flows[:, i])
            state = self.backward_cell(y[:, i], aligned)
            states[i] = state
        return states

    def _check_flows(self, flows: torch.Tensor | None, b: int, t: int, h: int, w: int) -> torch.Tensor:
        if flows is None:
            return torch.zeros(b, max(t - 1, 0), h, w, 2)
        if flows.ndim == 4:
            flows = flows.unsqueeze(0).expand(b, -1, -1, -1, -1)
        if flows.shape[1] != t - 1:
            raise ValueError(f"expected {t - 1} flows for {t} frames, got {flows.shape[1]}")
        if flows.shape[2] != h or flows.shape[3] != w:
            raise ValueError(f"flow grid {tuple(flows.shape[2:4])} does not match frames {(h, w)}")
        return flows

    def propagate_forward(self, seq, flows_fwd: list[FlowField]) -> list[BlindSpotState]:
        """VideoSequence-level forward propagation returning per-frame states."""
        return self._propagate(seq, flows_fwd, "forward")

    def propagate_backward(self, seq, flows_bwd: list[FlowField]) -> list[BlindSpotState]:
        return self._propagate(seq, flows_bwd, "backward")

    @torch.no_grad()
    def _propagate(self, seq, flows: list[FlowField], direction: str) -> list[BlindSpotState]:
        arr = np.asarray(getattr(seq, "frames", seq), dtype=np.float32)
        t, h, w, _ = arr.shape
        y = torch.from_numpy(arr).permute(0, 3, 1, 2).unsqueeze(0)
        ftens = _flows_to_tensor(flows, t, h, w)
        run = self.run_forward if direction == "forward" else self.run_backward
        states = run(y, ftens if t > 1 else None)
        return [
            BlindSpotState(features=s[0].permute(1, 2, 0).numpy(), direction=direction, frame_index=i)
            for i, s in enumerate(states)
        ]
