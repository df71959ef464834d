"""Optical flow estimation between noisy frames and its distillation refinement.

Three pluggable backends: a tiny trainable coarse-to-fine pyramid CNN (the
only backend eligible for distillation), dense pyramidal Lucas-Kanade, and an
external-tool adapter speaking a documented file contract. The distillation
loss supervises the student's flows on noisy frames with stop-gradient
teacher flows computed on restored frames.
"""

from __future__ import annotations

import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .warp import FlowField, warp_tensor

FLOW_MAGIC = b"STBNFLO1"
BACKENDS = ("tiny_pyramid", "classical_lk", "external_adapter")


@dataclass
class FlowEstimatorConfig:
    backend: str = "tiny_pyramid"
    pyramid_levels: int = 3
    iterations: int = 3
    command: str | None = None  # external_adapter template with {frame_a} {frame_b} {flow_out}

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.backend == "external_adapter" and not self.command:
            raise ValueError("external_adapter requires a command template")

    @property
    def trainable(self) -> bool:
        return self.backend == "tiny_pyramid"


@dataclass
class DistillationConfig:
    alpha: float = 5e-4
    warmup_iterations: int = 1000
    weight_decay_gamma: float = 4e-5
    refresh_every: int = 1  # regenerate teacher flows every N steps

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.warmup_iterations < 0:
            raise ValueError("warmup must be >= 0")


class TinyPyramidEstimator(nn.Module):
    """Coarse-to-fine residual flow CNN.

    At each pyramid level (built by 2x average pooling) a small conv stack
    predicts a residual flow from [frame_a, frame_b warped by the upsampled
    flow, the upsampled flow itself]; levels are shared-weight-free. Output
    is the backward flow on frame_a's grid pointing into frame_b.
    """

    def __init__(self, image_channels: int = 1, levels: int = 3, features: int = 16, seed: int = 0):
        super().__init__()
        self.levels = levels
        self.image_channels = image_channels
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        for _ in range(levels):
            stage = nn.Sequential(
                nn.Conv2d(2 * image_channels + 2, features, 3, padding=1),
                nn.LeakyReLU(0.1),
                nn.Conv2d(features, features, 3, padding=1),
                nn.LeakyReLU(0.1),
                nn.Conv2d(features, 2, 3, padding=1),
            )
            self.stages.append(stage)
        for p in self.parameters():
            if p.ndim > 1:
                nn.init.kaiming_uniform_(p, a=0.1, generator=gen)
            else:
                nn.init.zeros_(p)
        # residual predictions start near zero so the untrained flow is tame
        for stage in self.stages:
            nn.init.normal_(stage[-1].weight, std=1e-3, generator=gen)
            nn.init.zeros_(stage[-1].bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) pair -> (B, H, W, 2) flow."""
        if a.shape != b.shape:
            raise ValueError(f"frame shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        pyr_a, pyr_b = [a], [b]
        for _ in range(self.levels - 1):
            pyr_a.append(F.avg_pool2d(pyr_a[-1], 2, ceil_mode=True))
            pyr_b.append(F.avg_pool2d(pyr_b[-1], 2, ceil_mode=True))
        flow = None
        for level in range(self.levels - 1, -1, -1):
            al, bl = pyr_a[level], pyr_b[level]
            if flow is None:
                flow = al.new_zeros(al.shape[0], 2, al.shape[2], al.shape[3])
            else:
                flow = 2.0 * F.interpolate(flow, size=al.shape[2:], mode="bilinear", align_corners=False)
            warped = warp_tensor(bl, flow.permute(0, 2, 3, 1), "bilinear")
            flow = flow + self.stages[level](torch.cat([al, warped, flow], dim=1))
        return flow.permute(0, 2, 3, 1)


class LucasKanadeEstimator:
    """Dense pyramidal Lucas-Kanade with iterative warping refinement."""

    def __init__(self, levels: int = 3, iterations: int = 3, window_sigma: float = 2.0, ridge: float = 1e-4):
        self.levels = levels
        self.iterations = iterations
        self.window_sigma = window_sigma
        self.ridge = ridge

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = _to_gray(a)
        b = _to_gray(b)
        pyr_a, pyr_b = [a], [b]
        for _ in range(self.levels - 1):
            pyr_a.append(_decimate(pyr_a[-1]))
            pyr_b.append(_decimate(pyr_b[-1]))
        h, w = pyr_a[-1].shape
        flow = np.zeros((h, w, 2), dtype=np.float64)
        for level in range(self.levels - 1, -1, -1):
            al, bl = pyr_a[level], pyr_b[level]
            if flow.shape[:2] != al.shape:
                flow = _resize_flow(flow, al.shape)
            for _ in range(self.iterations):
                flow += self._step(al, bl, flow)
        return flow.astype(np.float32)

    def _step(self, a: np.ndarray, b: np.ndarray, flow: np.ndarray) -> np.ndarray:
        h, w = a.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = np.stack([ys + flow[..., 1], xs + flow[..., 0]])
        warped = ndimage.map_coordinates(b, coords, order=1, mode="nearest")
        gy, gx = np.gradient(warped)
        it = warped - a
        win = lambda z: ndimage.gaussian_filter(z, self.window_sigma)
        gxx = win(gx * gx) + self.ridge
        gyy = win(gy * gy) + self.ridge
        gxy = win(gx * gy)
        bx = win(gx * it)
        by = win(gy * it)
        det = gxx * gyy - gxy * gxy
        du = -(gyy * bx - gxy * by) / det
        dv = -(gxx * by - gxy * bx) / det
        step = np.stack([du, dv], axis=-1)
        return np.clip(step, -2.0, 2.0)


class ExternalAdapterEstimator:
    """Run an external flow tool through the documented file contract.

    The command template receives two PNG paths and an output path; the tool
    must write a raw flow container (see :func:`save_flow`).
    """

    def __init__(self, command: str):
        self.command = command

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="stbn-flow-") as tmp:
            tmp = Path(tmp)
            pa, pb, out = tmp / "a.png", tmp / "b.png", tmp / "flow.stbnflo"
            _save_frame_png(a, pa)
            _save_frame_png(b, pb)
            cmd = self.command.format(frame_a=pa, frame_b=pb, flow_out=out)
            res = subprocess.run(cmd, shell=True, capture_output=True, text=True)
            if res.returncode != 0:
                raise RuntimeError(f"external flow tool failed ({res.returncode}): {res.stderr.strip()}")
            if not out.exists():
                raise RuntimeError("external flow tool produced no output file")
            return load_flow(out)


def build_estimator(config: FlowEstimatorConfig, image_channels: int = 1):
    if config.backend == "tiny_pyramid":
        return TinyPyramidEstimator(image_channels=image_channels, levels=config.pyramid_levels)
    if config.backend == "classical_lk":
        return LucasKanadeEstimator(levels=config.pyramid_levels, iterations=config.iterations)
    return ExternalAdapterEstimator(config.command)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, config_or_estimator, **tags) -> FlowField:
    """Dense backward flow mapping frame_a coordinates into frame_b.

    Accepts a FlowEstimatorConfig (a fresh backend is built) or an estimator
    instance. Frames are H x W x C arrays of matching shape.
    """
    a = np.asarray(frame_a, dtype=np.float32)
    b = np.asarray(frame_b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    est = build_estimator(config_or_estimator, image_channels=a.shape[-1]) if isinstance(config_or_estimator, FlowEstimatorConfig) else config_or_estimator
    if isinstance(est, nn.Module):
        with torch.no_grad():
            ta = torch.from_numpy(a).permute(2, 0, 1).unsqueeze(0)
            tb = torch.from_numpy(b).permute(2, 0, 1).unsqueeze(0)
            vec = est(ta, tb)[0].numpy()
    else:
        vec = est(a, b)
    return FlowField(vectors=np.asarray(vec, dtype=np.float32), **tags)


def freeze(estimator):
    """Mark an estimator frozen; torch modules get requires_grad=False + eval."""
    if isinstance(estimator, nn.Module):
        for p in estimator.parameters():
            p.requires_grad_(False)
        estimator.eval()
    return estimator


def is_frozen(estimator) -> bool:
    if isinstance(estimator, nn.Module):
        return not any(p.requires_grad for p in estimator.parameters())
    return True  # classical / external backends carry no trainable state


def make_teacher_flows(denoised, frozen_estimator, direction: str = "forward") -> list[FlowField]:
    """Pseudo-ground-truth flows from restored frames, tagged no-gradient.

    direction="forward" produces the flows the forward propagation pass
    consumes (grid of frame t, content of frame t-1); "backward" the mirror.
    The estimator must be frozen.
    """
    if not is_frozen(frozen_estimator):
        raise ValueError("teacher estimator must be frozen (call flow.freeze first)")
    frames = np.asarray(getattr(denoised, "frames", denoised), dtype=np.float32)
    t = frames.shape[0]
    flows = []
    for i in range(t - 1):
        if direction == "forward":
            f = estimate_flow(frames[i + 1], frames[i], frozen_estimator,
                              direction="forward", source_frame=i, target_frame=i + 1)
        else:
            f = estimate_flow(frames[i], frames[i + 1], frozen_estimator,
                              direction="backward", source_frame=i + 1, target_frame=i)
        flows.append(f)
    return flows


def _flow_tensor(f) -> torch.Tensor:
    v = f.vectors if isinstance(f, FlowField) else f
    if isinstance(v, torch.Tensor):
        return v
    return torch.from_numpy(np.asarray(v, dtype=np.float32))


def distillation_loss(student_flows, teacher_flows, student_params=None, weight_decay_gamma: float = 0.0) -> torch.Tensor:
    """L1 distillation between student and stop-gradient teacher flows.

    Per pair: mean absolute difference over pixels and components; pairs are
    summed. Adds weight_decay_gamma * sum(theta^2) over the student's
    parameters when given. Teacher tensors must not require grad.
    """
    if len(student_flows) != len(teacher_flows):
        raise ValueError(f"flow list lengths differ: {len(student_flows)} vs {len(teacher_flows)}")
    total = torch.zeros(())
    for s, t in zip(student_flows, teacher_flows):
        st = _flow_tensor(s)
        tt = _flow_tensor(t)
        if tt.requires_grad:
            raise ValueError("teacher flows must carry the no-gradient marker (detach them)")
        if st.shape != tt.shape:
            raise ValueError(f"flow shapes differ: {tuple(st.shape)} vs {tuple(tt.shape)}")
        total = total + (st - tt).abs().mean()
    if student_params is not None and weight_decay_gamma:
        reg = sum((p * p).sum() for p in student_params)
        total = total + weight_decay_gamma * reg
    return total


def endpoint_error(flow: np.ndarray | FlowField, gt: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean distance to a ground-truth flow."""
    v = np.asarray(flow.vectors if isinstance(flow, FlowField) else flow, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    g = np.broadcast_to(g, v.shape)
    return np.sqrt(((v - g) ** 2).sum(axis=-1))


_BINOMIAL5 = None


def _blur5(x: torch.Tensor) -> torch.Tensor:
    global _BINOMIAL5
    if _BINOMIAL5 is None:
        k = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0])
        k = k[:, None] * k[None, :]
        _BINOMIAL5 = (k / k.sum()).view(1, 1, 5, 5)
    c = x.shape[1]
    return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="reflect"), _BINOMIAL5.expand(c, 1, 5, 5), groups=c)


def photometric_loss(student: TinyPyramidEstimator, frames: torch.Tensor) -> torch.Tensor:
    """Warm-up objective: L1 consistency of bilinear-warped consecutive pairs.

    Frames are pre-blurred with a 5x5 binomial kernel so heavy noise does not
    dominate the matching term. This lives outside the propagation path, so
    bilinear interpolation is fine here (and needed: nearest would pass no
    gradient to the flow).
    """
    t = frames.shape[0]
    blurred = _blur5(frames)
    loss = torch.zeros(())
    for i, j in [(i, i + 1) for i in range(t - 1)] + [(i + 1, i) for i in range(t - 1)]:
        flow = student(frames[i : i + 1], frames[j : j + 1])
        warped = warp_tensor(blurred[j : j + 1], flow, "bilinear")
        loss = loss + (warped - blurred[i : i + 1]).abs().mean()
    return loss / max(2 * (t - 1), 1)


def train_flow_estimator(
    noisy_frames: np.ndarray,
    student: TinyPyramidEstimator,
    iterations: int,
    distill: DistillationConfig | None = None,
    teacher_estimator=None,
    teacher_frames: np.ndarray | None = None,
    lr: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Standalone flow training: photometric warm-up, then distillation.

    Before distill.warmup_iterations the student minimizes the photometric
    loss on noisy pairs; afterwards it minimizes alpha * (L1 to the frozen
    teacher's flows on teacher_frames + gamma * ||theta||^2). Returns a small
    history dict.
    """
    torch.manual_seed(seed)
    frames = torch.from_numpy(np.asarray(noisy_frames, dtype=np.float32)).permute(0, 3, 1, 2)
    opt = torch.optim.Adam(student.parameters(), lr=lr)
    distill = distill or DistillationConfig()
    teachers = None
    history = {"loss": [], "distill_active": []}
    for it in range(iterations):
        active = teacher_estimator is not None and it >= distill.warmup_iterations
        if active:
            if teachers is None or (distill.refresh_every and it % distill.refresh_every == 0):
                src = teacher_frames if teacher_frames is not None else noisy_frames
                teachers = make_teacher_flows(src, freeze(teacher_estimator), "forward")
                teachers += make_teacher_flows(src, freeze(teacher_estimator), "backward")
            students = student_pass_flows(student, frames)
            loss = distill.alpha * distillation_loss(
                students, [torch.from_numpy(t.vectors) for t in teachers],
                student_params=student.parameters(), weight_decay_gamma=distill.weight_decay_gamma,
            )
        else:
            loss = photometric_loss(student, frames)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["loss"].append(float(loss.detach()))
        history["distill_active"].append(bool(active))
    return history


def student_pass_flows(student: TinyPyramidEstimator, frames: torch.Tensor) -> list[torch.Tensor]:
    """Per-pair student flows in propagation order: forward pass pairs then backward.

    frames is (T, C, H, W); returns 2(T-1) flow tensors of shape (H, W, 2)
    that stay attached to the student's graph.
    """
    t = frames.shape[0]
    flows = [student(frames[i + 1 : i + 2], frames[i : i + 1])[0] for i in range(t - 1)]
    flows += [student(frames[i : i + 1], frames[i + 1 : i + 2])[0] for i in range(t - 1)]
    return flows


def save_flow(path: str | Path, vectors: np.ndarray) -> None:
    """Write an H x W x 2 float32 flow to the raw container format."""
    v = np.asarray(vectors, dtype="<f4")
    if v.ndim != 3 or v.shape[-1] != 2:
        raise ValueError(f"flow must be H x W x 2, got {v.shape}")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<2i", v.shape[0], v.shape[1]))
        fh.write(np.ascontiguousarray(v).tobytes())


def load_flow(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(FLOW_MAGIC))
        if magic != FLOW_MAGIC:
            raise ValueError(f"{path}: not a flow container (bad magic {magic!r})")
        h, w = struct.unpack("<2i", fh.read(8))
        data = np.frombuffer(fh.read(h * w * 2 * 4), dtype="<f4")
    if data.size != h * w * 2:
        raise ValueError(f"{path}: truncated flow container")
    return data.reshape(h, w, 2).copy()


def _to_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3:
        f = f.mean(axis=-1)
    return f


def _decimate(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 1.0)[::2, ::2]


def _resize_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    fh, fw = flow.shape[:2]
    ys = np.linspace(0, fh - 1, h)
    xs = np.linspace(0, fw - 1, w)
    grid = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((h, w, 2))
    for k in range(2):
        out[..., k] = ndimage.map_coordinates(flow[..., k], grid, order=1, mode="nearest")
    return out * np.array([w / fw, h / fh])


def _save_frame_png(frame: np.ndarray, path: Path) -> None:
    arr = np.clip(np.asarray(frame, dtype=np.float32), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path)
