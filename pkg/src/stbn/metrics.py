"""PSNR and SSIM on the internal [0, 1] intensity scale, plus sequence reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 100.0

# De-facto standard SSIM configuration: 11x11 Gaussian window (sigma 1.5,
# truncated at 3.5 sigma), K1=0.01, K2=0.03.
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_WIN = 11


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels.

    Identical inputs are reported as the documented 100 dB cap.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak**2 / mse), PSNR_CAP_DB)


def _ssim_plane(x: np.ndarray, y: np.ndarray, peak: float) -> float:
    pad = (_SSIM_WIN - 1) // 2
    filt = lambda a: ndimage.gaussian_filter(a, _SSIM_SIGMA, truncate=_SSIM_TRUNCATE)
    ux, uy = filt(x), filt(y)
    uxx, uyy, uxy = filt(x * x), filt(y * y), filt(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity between two images.

    RGB inputs are reduced to grayscale by the channel mean before the
    windowed comparison. Raises for images smaller than the 11x11 window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a.mean(axis=-1)
        b = b.mean(axis=-1)
    if a.ndim != 2:
        raise ValueError(f"ssim expects an image, got shape {a.shape}")
    if min(a.shape) < _SSIM_WIN:
        raise ValueError(f"image {a.shape} smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    return _ssim_plane(a, b, peak)


@dataclass
class EvalReport:
    """Per-frame and aggregate quality metrics for a denoised sequence."""

    per_frame_psnr: list[float]
    per_frame_ssim: list[float]
    mean_psnr: float
    mean_ssim: float
    global_ssim: float
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_frame_psnr": self.per_frame_psnr,
            "per_frame_ssim": self.per_frame_ssim,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "global_ssim": self.global_ssim,
            "config_echo": self.config_echo,
        }


def evaluate(reference_frames: np.ndarray, test_frames: np.ndarray, config_echo: dict | None = None) -> EvalReport:
    """Score a T x H x W x C sequence against a reference.

    mean_ssim is the per-frame average (the headline number); global_ssim
    pools every window across frames, which coincides with the per-frame
    average for constant frame sizes.
    """
    ref = np.asarray(reference_frames, dtype=np.float64)
    tst = np.asarray(test_frames, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {tst.shape}")
    psnrs = [psnr(r, t) for r, t in zip(ref, tst)]
    ssims = [ssim(r, t) for r, t in zip(ref, tst)]
    return EvalReport(
        per_frame_psnr=psnrs,
        per_frame_ssim=ssims,
        mean_psnr=float(np.mean(psnrs)),
        mean_ssim=float(np.mean(ssims)),
        global_ssim=float(np.mean(ssims)),
        config_echo=config_echo or {},
    )
