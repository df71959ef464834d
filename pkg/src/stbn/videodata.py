"""Video sequences, synthetic Gaussian noise, training crops, and on-disk formats.

Frames live in a T x H x W x C float32 array. Intensities are normalized to
[0, 1] internally; noise levels are quoted in 8-bit units and divided by 255.
Noisy sequences may leave [0, 1] and are never clipped before training --
clipping would correlate the noise with the signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

RAW_MAGIC = b"STBNVID1"

_IMAGE_SUFFIXES = {".png", ".PNG"}


@dataclass
class NoiseModel:
    """Parametric description of the corruption driving loss selection.

    kind : "gaussian_known_sigma" or "unknown"
    sigma : noise standard deviation in 8-bit units (present iff Gaussian)
    seed : RNG seed; sampling with the same seed is bit-reproducible
    """

    kind: str = "gaussian_known_sigma"
    sigma: float | None = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_known_sigma", "unknown"):
            raise ValueError(f"unknown noise kind: {self.kind!r}")
        if self.kind == "gaussian_known_sigma":
            if self.sigma is None or not self.sigma > 0:
                raise ValueError("gaussian_known_sigma requires sigma > 0")
        elif self.sigma is not None:
            raise ValueError("sigma only applies to gaussian_known_sigma")

    @property
    def sigma_internal(self) -> float:
        """Sigma on the internal [0, 1] intensity scale."""
        if self.sigma is None:
            raise ValueError("noise model has no sigma")
        return float(self.sigma) / 255.0


@dataclass
class VideoSequence:
    """A T x H x W x C stack of frames plus metadata.

    Clean sequences hold values in [0, 1]; noisy sequences may exceed the
    range and must not be clipped before loss computation.
    """

    frames: np.ndarray
    frame_rate: float | None = None
    id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise ValueError(f"frames must be T x H x W x C, got shape {frames.shape}")
        t, h, w, c = frames.shape
        if t < 1 or h < 8 or w < 8:
            raise ValueError(f"sequence too small: T={t}, H={h}, W={w} (need T>=1, H,W>=8)")
        if c not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {c}")
        if not np.isfinite(frames).all():
            raise ValueError("frames contain non-finite values")
        self.frames = frames

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def is_normalized(self) -> bool:
        """True when all values lie in [0, 1] (expected of clean sequences)."""
        return bool((self.frames >= 0.0).all() and (self.frames <= 1.0).all())


def _rng(seed: int) -> np.random.Generator:
    # Philox is counter-based, so streams are identical across platforms.
    return np.random.Generator(np.random.Philox(key=seed & (2**128 - 1)))


def add_awgn(clean: VideoSequence, model: NoiseModel) -> VideoSequence:
    """Corrupt a clean sequence with i.i.d. Gaussian noise.

    Adds N(0, (sigma/255)^2) per pixel and channel without clipping. The
    output is deterministic for a given model.seed.
    """
    if model.kind != "gaussian_known_sigma":
        raise ValueError(f"add_awgn requires a Gaussian noise model, got {model.kind!r}")
    if not np.isfinite(clean.frames).all():
        raise ValueError("clean frames contain non-finite values")
    if not clean.is_normalized():
        raise ValueError("clean frames must lie in [0, 1]")
    noise = _rng(model.seed).standard_normal(clean.frames.shape, dtype=np.float32)
    noisy = clean.frames + model.sigma_internal * noise
    return VideoSequence(frames=noisy, frame_rate=clean.frame_rate, id=f"{clean.id}+awgn{model.sigma:g}")


def crop_training_batch(seq: VideoSequence, length: int, size: int, seed: int) -> VideoSequence:
    """Cut a temporally contiguous, spatially aligned random crop.

    The same spatial window is used for every frame. Two calls with equal
    seeds return identical crops.
    """
    t, h, w, _ = seq.shape
    if length > t:
        raise ValueError(f"crop length {length} exceeds sequence length {t}")
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds frame size {h}x{w}")
    rng = _rng(seed)
    t0 = int(rng.integers(0, t - length + 1))
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    frames = seq.frames[t0 : t0 + length, y0 : y0 + size, x0 : x0 + size, :]
    return VideoSequence(frames=frames.copy(), frame_rate=seq.frame_rate, id=f"{seq.id}[crop]")


def make_translating_texture(
    t: int = 5,
    h: int = 64,
    w: int = 64,
    c: int = 1,
    dx: float = 1.0,
    dy: float = 0.0,
    num_waves: int = 24,
    min_wavelength: float = 8.0,
    seed: int = 0,
) -> VideoSequence:
    """Synthesize a band-limited texture translating by (dx, dy) px per frame.

    Frames are exact point-samples of a fixed sum of random sinusoids, so the
    ground-truth backward flow of every consecutive pair is the constant
    (-dx, -dy): warp(frame[k+1], (-dx, -dy)) reproduces frame[k] exactly.
    Useful as a motion oracle and as clean training material; lower
    min_wavelength makes the content finer and harder to predict spatially.
    """
    rng = _rng(seed)
    freqs = rng.uniform(-1.0, 1.0, size=(c, num_waves, 2)) * (2 * np.pi / min_wavelength)
    phases = rng.uniform(0, 2 * np.pi, size=(c, num_waves))
    amps = rng.uniform(0.5, 1.0, size=(c, num_waves))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((t, h, w, c), dtype=np.float32)
    for k in range(t):
        px = xs + k * dx
        py = ys + k * dy
        for ch in range(c):
            acc = np.zeros((h, w))
            for wv in range(num_waves):
                acc += amps[ch, wv] * np.sin(freqs[ch, wv, 0] * px + freqs[ch, wv, 1] * py + phases[ch, wv])
            frames[k, ..., ch] = acc
    lo, hi = frames.min(), frames.max()
    frames = 0.1 + 0.8 * (frames - lo) / max(hi - lo, 1e-9)
    return VideoSequence(frames=frames, id=f"texture{t}x{h}x{w}")


def save_sequence(seq: VideoSequence, path: str | Path) -> None:
    """Write a sequence to disk.

    A path ending in ``.stbnvid`` is written as the raw float32 container
    (lossless roundtrip); any other path is treated as a directory of 8-bit
    PNG frames (values clipped to [0, 1] and quantized).
    """
    path = Path(path)
    if path.suffix == ".stbnvid":
        _save_raw(seq, path)
        return
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        arr = np.clip(frame, 0.0, 1.0)
        arr = np.round(arr * 255.0).astype(np.uint8)
        if arr.shape[-1] == 1:
            img = Image.fromarray(arr[..., 0], mode="L")
        else:
            img = Image.fromarray(arr, mode="RGB")
        img.save(path / f"{i:04d}.png")


def load_sequence(path: str | Path) -> VideoSequence:
    """Read a sequence from a PNG frame directory or a raw container file.

    Directory frames are ordered lexicographically by filename.
    """
    path = Path(path)
    if path.is_dir():
        return _load_png_dir(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return _load_raw(path)


def _save_raw(seq: VideoSequence, path: Path) -> None:
    t, h, w, c = seq.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<4i", t, h, w, c))
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def _load_raw(path: Path) -> VideoSequence:
    with open(path, "rb") as fh:
        magic = fh.read(len(RAW_MAGIC))
        if magic != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw video container (bad magic {magic!r})")
        t, h, w, c = struct.unpack("<4i", fh.read(16))
        data = np.frombuffer(fh.read(t * h * w * c * 4), dtype="<f4")
    if data.size != t * h * w * c:
        raise ValueError(f"{path}: truncated container")
    return VideoSequence(frames=data.reshape(t, h, w, c).copy(), id=path.stem)


def _load_png_dir(path: Path) -> VideoSequence:
    files = sorted(p for p in path.iterdir() if p.suffix in _IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"{path}: no frames found")
    frames = []
    for p in files:
        img = Image.open(p)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[..., None]
        frames.append(arr)
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ValueError(f"{path}: mixed frame shapes {sorted(shapes)}")
    return VideoSequence(frames=np.stack(frames), id=path.name)
