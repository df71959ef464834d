"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .videodata import VideoSequence


def check_video(X, allow_out_of_range: bool = True) -> np.ndarray:
    """Coerce input to a float32 T x H x W x C array and validate it.

    Accepts a VideoSequence, a T x H x W x C array, or a T x H x W array
    (treated as single-channel). Set allow_out_of_range=False for clean
    references that must live in [0, 1].
    """
    arr = getattr(X, "frames", X)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"expected a T x H x W x C video array, got shape {arr.shape}")
    t, h, w, c = arr.shape
    if t < 1 or h < 8 or w < 8:
        raise ValueError(f"video too small: T={t}, H={h}, W={w} (need T>=1, H,W>=8)")
    if c not in (1, 3):
        raise ValueError(f"channel count must be 1 or 3, got {c}")
    if not np.isfinite(arr).all():
        raise ValueError("video contains non-finite values")
    if not allow_out_of_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("clean video must lie in [0, 1]")
    return arr


def as_sequence(X, id: str = "") -> VideoSequence:
    if isinstance(X, VideoSequence):
        return X
    return VideoSequence(frames=check_video(X), id=id)


def check_fitted(estimator, attr: str = "result_"):
    if not hasattr(estimator, attr):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() with the noisy clip first"
        )
