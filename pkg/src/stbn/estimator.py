"""sklearn-style estimator facade.

fit(X) runs fully self-supervised training on the noisy clip itself (no
labels, no clean data); transform(X) denoises. Composes with sklearn
utilities via get_params/set_params/clone.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .metrics import psnr
from .train import TrainConfig, denoise_sequence, train
from .validation import as_sequence, check_fitted, check_video
from .videodata import NoiseModel


class STBNDenoiser(BaseEstimator, TransformerMixin):
    """Self-supervised video denoiser with a spatiotemporal blind-spot network.

    Parameters mirror the training configuration; the defaults are the
    desk-scale preset (minutes on a CPU). sigma is the Gaussian noise level
    in 8-bit units; set loss="l2" with sigma=None when the noise model is
    unknown.

    Examples
    --------
    >>> den = STBNDenoiser(sigma=25, iterations=300)
    >>> den.fit(noisy_frames)            # noisy_frames: T x H x W x C in [0,1]+noise
    >>> restored = den.transform(noisy_frames)
    """

    def __init__(
        self,
        sigma=25.0,
        loss="nll_gaussian",
        preset="desk",
        iterations=None,
        crop_size=None,
        seq_length=None,
        batch_size=None,
        learning_rate=None,
        use_bsa=True,
        use_srfe=True,
        flow_refine=True,
        flow_backend="tiny_pyramid",
        distill_warmup=None,
        seed=0,
    ):
        self.sigma = sigma
        self.loss = loss
        self.preset = preset
        self.iterations = iterations
        self.crop_size = crop_size
        self.seq_length = seq_length
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.use_bsa = use_bsa
        self.use_srfe = use_srfe
        self.flow_refine = flow_refine
        self.flow_backend = flow_backend
        self.distill_warmup = distill_warmup
        self.seed = seed

    def _build_config(self) -> TrainConfig:
        base = TrainConfig.desk_scale() if self.preset == "desk" else TrainConfig.paper_scale()
        overrides = {
            k: v
            for k, v in {
                "iterations": self.iterations,
                "crop_size": self.crop_size,
                "seq_length": self.seq_length,
                "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
            }.items()
            if v is not None
        }
        cfg = replace(base, loss=self.loss, seed=self.seed, **overrides)
        cfg = replace(cfg, flow=replace(cfg.flow, backend=self.flow_backend))
        toggles = replace(
            cfg.component_toggles,
            bsa=self.use_bsa,
            srfe=self.use_srfe,
            flow_refine=self.flow_refine and self.flow_backend == "tiny_pyramid",
        )
        cfg = replace(cfg, component_toggles=toggles)
        if self.distill_warmup is not None:
            cfg = replace(cfg, distill=replace(cfg.distill, warmup_iterations=self.distill_warmup))
        return cfg

    def _noise_model(self) -> NoiseModel:
        if self.sigma is None:
            return NoiseModel(kind="unknown", sigma=None, seed=self.seed)
        return NoiseModel(sigma=self.sigma, seed=self.seed)

    def fit(self, X, y=None):
        """Train on the noisy clip itself. y is ignored (self-supervised)."""
        seq = as_sequence(X, id="fit-input")
        self.config_ = self._build_config()
        self.noise_model_ = self._noise_model()
        self.result_ = train(seq, self.config_, self.noise_model_)
        return self

    def transform(self, X) -> np.ndarray:
        """Denoise a clip with the fitted model.

        Returns a T x H x W x C float array; values are not clipped (that
        happens only when saving to 8-bit formats).
        """
        check_fitted(self)
        arr = check_video(X)
        return denoise_sequence(self.result_.model, self.result_.flow_estimator, arr, self.noise_model_)

    # estimator-flavoured alias
    predict = transform

    def score(self, X, y) -> float:
        """PSNR (dB) of the denoised X against a clean reference y."""
        clean = check_video(y, allow_out_of_range=False)
        return psnr(clean, np.clip(self.transform(X), 0.0, 1.0))
