"""The assembled spatiotemporal blind-spot network.

Construction runs a gradient self-check on a tiny input and refuses to build
any configuration whose output pixel depends on the co-located input pixel of
its own frame; the blind-spot property is certified, not assumed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .blindspot import BlindSpotLayerConfig
from .propagation import BidirectionalPropagation
from .srfe import SRFE, PointwiseHead, SRFEConfig


class BlindSpotViolation(RuntimeError):
    """Raised when a model configuration leaks the co-located input pixel."""


@dataclass
class ModelConfig:
    image_channels: int = 1
    blindspot: BlindSpotLayerConfig = field(default_factory=BlindSpotLayerConfig)
    srfe: SRFEConfig = field(default_factory=SRFEConfig)
    use_bsa: bool = True
    use_srfe: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["blindspot"] = BlindSpotLayerConfig(**d.get("blindspot", {}))
        d["srfe"] = SRFEConfig(**d.get("srfe", {}))
        return cls(**d)


class STBNVideoModel(nn.Module):
    """Bidirectional blind-spot propagation plus per-frame spatial fusion.

    forward() accepts (T, C, H, W) or (B, T, C, H, W) frames and optional
    per-pair flow tensors ((T-1, H, W, 2) or batched); missing flows mean a
    static scene. Output channel count follows the configured head.
    """

    def __init__(self, config: ModelConfig | None = None, self_check: bool = True):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config.image_channels
        self.propagation = BidirectionalPropagation(c, self.config.blindspot, use_bsa=self.config.use_bsa)
        hidden = self.config.blindspot.channels
        if self.config.use_srfe:
            self.fusion = SRFE(hidden, c, self.config.srfe, activation=self.config.blindspot.activation)
        else:
            self.fusion = PointwiseHead(hidden, c, self.config.srfe.head, activation=self.config.blindspot.activation)
        self.out_channels = self.fusion.out_channels
        if self_check:
            self.assert_blind_spot()

    def forward(self, y: torch.Tensor, flows_fwd: torch.Tensor | None = None, flows_bwd: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = y.ndim == 4
        if squeeze:
            y = y.unsqueeze(0)
        if y.ndim != 5:
            raise ValueError(f"expected (B, T, C, H, W) frames, got shape {tuple(y.shape)}")
        states_f = self.propagation.run_forward(y, flows_fwd)
        states_b = self.propagation.run_backward(y, flows_bwd)
        out = torch.stack([self.fusion(f, b) for f, b in zip(states_f, states_b)], dim=1)
        return out[0] if squeeze else out

    @torch.enable_grad()
    def assert_blind_spot(self, size: int = 16, frames: int = 2) -> None:
        """Probe a tiny input and raise BlindSpotViolation on any center leak.

        Checks one pixel per sub-pixel phase of the shuffle factor on both a
        boundary and an interior frame; the property is structural, so any
        leak shows up at every scale.
        """
        s = min(max(self.config.srfe.shuffle_factor, 1), 4)  # one probe per sub-pixel phase
        x = torch.rand(frames, self.config.image_channels, size, size, dtype=torch.float32)
        x.requires_grad_(True)
        out = self(x)
        mid = size // 2
        probes = [(t, mid + dy, mid + dx) for t in range(frames) for dy in range(s) for dx in range(s)]
        for t0, y0, x0 in probes:
            for c in range(out.shape[1]):
                (g,) = torch.autograd.grad(out[t0, c, y0, x0], x, retain_graph=True)
                leak = g[t0, :, y0, x0].abs().max().item()
                if leak != 0.0:
                    raise BlindSpotViolation(
                        f"output({t0},{y0},{x0},ch{c}) depends on its own input pixel (|grad|={leak:.3e}); "
                        "this configuration is not blind-spot safe"
                    )

    def with_flows(self, flows_fwd: torch.Tensor | None, flows_bwd: torch.Tensor | None):
        """Bind flow tensors, yielding a frames-only callable for probing."""

        def predictor(y: torch.Tensor) -> torch.Tensor:
            return self(y, flows_fwd, flows_bwd)

        return predictor
