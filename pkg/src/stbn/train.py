"""Self-supervised training: blind-spot losses, posterior inference, the
Monte-Carlo risk-gap check, the Adam loop with flow distillation, ablation
runs, and checkpoint I/O.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .blindspot import probe_dependency
from .flow import (
    DistillationConfig,
    FlowEstimatorConfig,
    TinyPyramidEstimator,
    build_estimator,
    distillation_loss,
    freeze,
    photometric_loss,
)
from .metrics import psnr
from .model import ModelConfig, STBNVideoModel
from .videodata import NoiseModel, VideoSequence, crop_training_batch

LOSSES = ("nll_gaussian", "l2")
LOG_VAR_RANGE = (-10.0, 4.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ComponentToggles:
    """The ablation table's four rows: propagation only, +BSA, +SRFE, +refine."""

    bsa: bool = True
    srfe: bool = True
    flow_refine: bool = True


@dataclass
class TrainConfig:
    loss: str = "nll_gaussian"
    learning_rate: float = 1e-4
    crop_size: int = 96
    seq_length: int = 10
    iterations: int = 2000
    batch_size: int = 4
    distill: DistillationConfig = field(default_factory=DistillationConfig)
    flow: FlowEstimatorConfig = field(default_factory=FlowEstimatorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    component_toggles: ComponentToggles = field(default_factory=ComponentToggles)
    seed: int = 0
    log_every: int = 50
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.component_toggles.flow_refine and not self.flow.trainable:
            raise ValueError("flow_refine requires the trainable tiny_pyramid backend")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Small preset that trains in minutes on a laptop CPU."""
        from .blindspot import BlindSpotLayerConfig
        from .srfe import SRFEConfig

        cfg = cls(
            crop_size=48,
            seq_length=5,
            iterations=500,
            batch_size=2,
            learning_rate=1e-3,
            distill=DistillationConfig(warmup_iterations=150, refresh_every=10),
            model=ModelConfig(
                blindspot=BlindSpotLayerConfig(channels=24, num_dconv_blocks=2),
                srfe=SRFEConfig(channels=32, num_residual_blocks=2),
            ),
        )
        return replace(cfg, **overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """The published hyperparameters (expects serious compute)."""
        return replace(cls(), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "distill" in d:
            d["distill"] = DistillationConfig(**d["distill"])
        if "flow" in d:
            d["flow"] = FlowEstimatorConfig(**d["flow"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "component_toggles" in d:
            d["component_toggles"] = ComponentToggles(**d["component_toggles"])
        return cls(**d)


@dataclass
class GaussianPrediction:
    """Predicted clean-signal Gaussian: per-pixel mean and log-variance."""

    mu: torch.Tensor
    log_var: torch.Tensor


def split_prediction(raw: torch.Tensor) -> GaussianPrediction:
    """Split a gaussian_params head output (.., 2C, ..) into mu and log_var.

    log_var is clamped to [-10, 4] for numerical stability; the clamp lives
    here, on the network side, so the posterior algebra itself stays exact.
    """
    c2 = raw.shape[-3]
    if c2 % 2:
        raise ValueError(f"gaussian head needs an even channel count, got {c2}")
    c = c2 // 2
    mu = raw.narrow(-3, 0, c)
    log_var = raw.narrow(-3, c, c).clamp(*LOG_VAR_RANGE)
    return GaussianPrediction(mu=mu, log_var=log_var)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.asarray(x, dtype=np.float32))


def nll_loss(pred: GaussianPrediction, noisy, sigma: float) -> torch.Tensor:
    """Gaussian negative log-likelihood of the noisy pixel under mu and
    total variance exp(log_var) + sigma^2, averaged over pixels (constant
    0.5*log(2*pi) dropped)."""
    y = _as_tensor(noisy)
    if not torch.isfinite(pred.mu).all() or not torch.isfinite(pred.log_var).all():
        raise ValueError("non-finite prediction")
    s2 = pred.log_var.exp() + sigma**2
    return (0.5 * ((y - pred.mu) ** 2 / s2 + torch.log(s2))).mean()


def l2_blind_loss(pred, noisy_target) -> torch.Tensor:
    """Mean squared error between the blind-spot prediction and the noisy pixels."""
    p = pred.mu if isinstance(pred, GaussianPrediction) else _as_tensor(pred)
    y = _as_tensor(noisy_target)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    return ((p - y) ** 2).mean()


def posterior_mean(pred: GaussianPrediction, noisy, sigma: float):
    """Conjugate-Gaussian posterior mean given the observed noisy value.

    (exp(log_var) * y + sigma^2 * mu) / (exp(log_var) + sigma^2): a convex
    combination that trusts mu when the network is certain and y when it is
    not.
    """
    if sigma is None:
        raise ValueError("posterior inference requires a known sigma")
    y = _as_tensor(noisy)
    v = pred.log_var.exp()
    return (v * y + sigma**2 * pred.mu) / (v + sigma**2)


def _passes_blind_probe(model, image_channels: int, rng_seed: int = 0, pixels: int = 3) -> bool:
    rng = np.random.default_rng(rng_seed)
    frames = rng.random((2, 16, 16, image_channels), dtype=np.float32)
    for _ in range(pixels):
        t0 = int(rng.integers(0, 2))
        y0 = int(rng.integers(4, 12))
        x0 = int(rng.integers(4, 12))
        maps = probe_dependency(model, frames, (t0, y0, x0))
        if maps[t0].center_magnitude != 0.0:
            return False
    return True


def verify_risk_gap(
    model,
    clean_toy: VideoSequence,
    sigma: float,
    num_noise_draws: int = 100_000,
    seed: int = 0,
    force: bool = False,
) -> dict:
    """Monte-Carlo check that self-supervised risk exceeds supervised risk by
    exactly the noise variance.

    sigma is on the internal [0, 1] scale. num_noise_draws counts pixel-draws
    (noise realizations times pixels). Refuses to report when the model fails
    the blind-spot probe, because the identity provably does not hold then;
    force=True computes anyway (negative controls).
    """
    frames = np.asarray(clean_toy.frames, dtype=np.float32)
    t, h, w, c = frames.shape
    if not force and not _passes_blind_probe(model, c):
        raise ValueError("model fails the blind-spot probe; risk-gap identity does not hold")
    clean = torch.from_numpy(frames).permute(0, 3, 1, 2)
    pixels = clean.numel()
    draws = max(1, math.ceil(num_noise_draws / pixels))
    gen = torch.Generator().manual_seed(seed)
    self_risk = 0.0
    sup_risk = 0.0
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for _ in range(draws):
            noise = sigma * torch.randn(clean.shape, generator=gen)
            y = clean + noise
            out = model(y)
            pred = split_prediction(out).mu if out.shape[1] == 2 * c else out
            self_risk += ((pred - y) ** 2).mean().item()
            sup_risk += ((pred - clean) ** 2).mean().item()
    if was_training and hasattr(model, "train"):
        model.train()
    gap = (self_risk - sup_risk) / draws
    expected = sigma**2
    return {
        "gap_estimate": gap,
        "expected_constant": expected,
        "relative_error": abs(gap - expected) / expected,
        "num_noise_draws": draws * pixels,
    }


@dataclass
class TrainResult:
    model: STBNVideoModel
    flow_estimator: object
    config: TrainConfig
    noise_model: NoiseModel | None
    iteration: int
    history: list[dict]


def _student_flows(estimator, y: torch.Tensor):
    """Forward- and backward-pass flow tensors (B, T-1, H, W, 2) for a batch."""
    b, t, c, h, w = y.shape
    if t < 2:
        return None, None, []
    if isinstance(estimator, torch.nn.Module):
        fwd = [estimator(y[:, i + 1], y[:, i]) for i in range(t - 1)]
        bwd = [estimator(y[:, i], y[:, i + 1]) for i in range(t - 1)]
    else:
        fwd, bwd = [], []
        arr = y.permute(0, 1, 3, 4, 2).numpy()
        for i in range(t - 1):
            fwd.append(torch.from_numpy(np.stack([estimator(arr[k, i + 1], arr[k, i]) for k in range(b)])))
            bwd.append(torch.from_numpy(np.stack([estimator(arr[k, i], arr[k, i + 1]) for k in range(b)])))
    ff = torch.stack(fwd, dim=1)
    fb = torch.stack(bwd, dim=1)
    return ff, fb, fwd + bwd


def _model_for(config: TrainConfig, image_channels: int, self_check: bool = True) -> STBNVideoModel:
    head = "gaussian_params" if config.loss == "nll_gaussian" else "regression"
    mc = replace(
        config.model,
        image_channels=image_channels,
        use_bsa=config.component_toggles.bsa,
        use_srfe=config.component_toggles.srfe,
        srfe=replace(config.model.srfe, head=head),
    )
    return STBNVideoModel(mc, self_check=self_check)


def predict_frames(model: STBNVideoModel, y: torch.Tensor, ff, fb, sigma: float | None):
    """Model output plus the inference-path estimate (posterior mean when available)."""
    out = model(y, ff, fb)
    if model.out_channels == 2 * model.config.image_channels:
        pred = split_prediction(out)
        est = posterior_mean(pred, y, sigma) if sigma is not None else pred.mu
        return out, pred, est
    return out, None, out


def train(
    noisy,
    config: TrainConfig,
    noise_model: NoiseModel | None = None,
    probe: tuple | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainResult:
    """Run the self-supervised loop on one or more noisy sequences.

    noisy : VideoSequence or list of VideoSequence (training material; for the
        fully self-supervised mode this is the clip to be denoised itself)
    probe : optional (noisy_seq, clean_seq) pair scored with PSNR at every
        logging interval
    Raises TrainingDiverged when the loss leaves the finite realm.
    """
    videos = [noisy] if isinstance(noisy, VideoSequence) else list(noisy)
    if not videos:
        raise ValueError("no training sequences given")
    sigma = None
    if config.loss == "nll_gaussian":
        if noise_model is None or noise_model.kind != "gaussian_known_sigma":
            raise ValueError("nll_gaussian requires a gaussian_known_sigma noise model")
        sigma = noise_model.sigma_internal
    channels = videos[0].shape[-1]

    torch.manual_seed(config.seed)
    model = _model_for(config, channels)
    estimator = build_estimator(config.flow, image_channels=channels)
    params = list(model.parameters())
    if isinstance(estimator, torch.nn.Module):
        params += list(estimator.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)

    toggles = config.component_toggles
    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for it in range(config.iterations):
            crops = []
            for k in range(config.batch_size):
                video = videos[(it * config.batch_size + k) % len(videos)]
                seed = config.seed * 1_000_003 + it * config.batch_size + k
                length = min(config.seq_length, video.num_frames)
                size = min(config.crop_size, min(video.shape[1], video.shape[2]))
                crops.append(crop_training_batch(video, length, size, seed).frames)
            y = torch.from_numpy(np.stack(crops)).permute(0, 1, 4, 2, 3)

            ff, fb, student_flows = _student_flows(estimator, y)
            out, pred, est = predict_frames(model, y, ff, fb, sigma)
            if not torch.isfinite(out).all():
                raise TrainingDiverged(f"model output became non-finite at iteration {it}")
            if config.loss == "nll_gaussian":
                loss = nll_loss(pred, y, sigma)
            else:
                loss = l2_blind_loss(out, y)

            # flow schedule: photometric warm-up builds the initial estimator;
            # afterwards the student is refined by distillation when enabled
            # and otherwise frozen at its warmed-up state (no loss touches it)
            alpha_active = False
            if isinstance(estimator, TinyPyramidEstimator) and y.shape[1] > 1:
                warm = it < config.distill.warmup_iterations
                if warm:
                    flow_loss = torch.stack([photometric_loss(estimator, y[k]) for k in range(y.shape[0])]).mean()
                    loss = loss + flow_loss
                elif toggles.flow_refine:
                    alpha_active = True
                    snapshot = freeze(copy.deepcopy(estimator))
                    denoised = est.detach()
                    with torch.no_grad():
                        teachers = [snapshot(denoised[:, i + 1], denoised[:, i]) for i in range(y.shape[1] - 1)]
                        teachers += [snapshot(denoised[:, i], denoised[:, i + 1]) for i in range(y.shape[1] - 1)]
                    loss = loss + config.distill.alpha * distillation_loss(
                        student_flows, teachers,
                        student_params=estimator.parameters(),
                        weight_decay_gamma=config.distill.weight_decay_gamma,
                    )

            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at iteration {it}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()

            if (it + 1) % config.log_every == 0 or it == config.iterations - 1:
                record = {"iter": it + 1, "loss": float(loss.detach()), "psnr_probe": None, "alpha_active": alpha_active}
                if probe is not None:
                    den = denoise_sequence(model, estimator, probe[0].frames, noise_model)
                    record["psnr_probe"] = psnr(probe[1].frames, den)
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if checkpoint_path:  # rolling checkpoint at each logging interval
                    save_checkpoint(checkpoint_path, TrainResult(
                        model=model, flow_estimator=estimator, config=config,
                        noise_model=noise_model, iteration=it + 1, history=history))
    finally:
        if log_fh:
            log_fh.close()

    result = TrainResult(model=model, flow_estimator=estimator, config=config,
                         noise_model=noise_model, iteration=config.iterations, history=history)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, result)
    return result


@torch.no_grad()
def denoise_sequence(model: STBNVideoModel, estimator, frames: np.ndarray, noise_model: NoiseModel | None = None) -> np.ndarray:
    """Full-pipeline inference on a T x H x W x C array; output is not clipped."""
    arr = np.asarray(frames, dtype=np.float32)
    y = torch.from_numpy(arr).permute(0, 3, 1, 2).unsqueeze(0)
    ff, fb, _ = _student_flows(estimator, y)
    sigma = None
    if noise_model is not None and noise_model.kind == "gaussian_known_sigma":
        sigma = noise_model.sigma_internal
    was_training = model.training
    model.eval()
    _, _, est = predict_frames(model, y, ff, fb, sigma)
    if was_training:
        model.train()
    return est[0].permute(0, 2, 3, 1).numpy()


def denoise(seq: VideoSequence, checkpoint, noise_model: NoiseModel | None = None) -> VideoSequence:
    """Denoise a sequence with a trained checkpoint (path or TrainResult)."""
    if isinstance(checkpoint, TrainResult):
        model, estimator = checkpoint.model, checkpoint.flow_estimator
    else:
        model, estimator, _, _ = load_checkpoint(checkpoint)
    if model.config.image_channels != seq.shape[-1]:
        raise ValueError(
            f"checkpoint expects {model.config.image_channels} channels, sequence has {seq.shape[-1]}"
        )
    out = denoise_sequence(model, estimator, seq.frames, noise_model)
    return VideoSequence(frames=np.clip(out, 0.0, 1.0), frame_rate=seq.frame_rate, id=f"{seq.id}+denoised")


def save_checkpoint(path: str | Path, result: TrainResult) -> None:
    """Single-file archive: named parameter tensors, config echo, iteration."""
    flow_state = None
    if isinstance(result.flow_estimator, torch.nn.Module):
        flow_state = result.flow_estimator.state_dict()
    torch.save(
        {
            "model_state": result.model.state_dict(),
            "flow_state": flow_state,
            "train_config": result.config.to_dict(),
            "model_config": result.model.config.to_dict(),
            "noise_model": asdict(result.noise_model) if result.noise_model else None,
            "iteration": result.iteration,
        },
        path,
    )


def load_checkpoint(path: str | Path):
    """Rebuild (model, flow_estimator, train_config, iteration) from disk.

    Construction re-runs the blind-spot self-check, so a loaded model is
    re-certified before use.
    """
    blob = torch.load(path, weights_only=True)
    mc = ModelConfig.from_dict(blob["model_config"])
    model = STBNVideoModel(mc)
    model.load_state_dict(blob["model_state"])
    config = TrainConfig.from_dict(blob["train_config"])
    estimator = build_estimator(config.flow, image_channels=mc.image_channels)
    if blob["flow_state"] is not None and isinstance(estimator, torch.nn.Module):
        estimator.load_state_dict(blob["flow_state"])
    return model, estimator, config, blob["iteration"]


ABLATION_ROWS = (
    ("propagation", ComponentToggles(bsa=False, srfe=False, flow_refine=False)),
    ("+bsa", ComponentToggles(bsa=True, srfe=False, flow_refine=False)),
    ("+srfe", ComponentToggles(bsa=True, srfe=True, flow_refine=False)),
    ("+flow_refine", ComponentToggles(bsa=True, srfe=True, flow_refine=True)),
)


def run_ablation(
    noisy: VideoSequence,
    clean: VideoSequence,
    config: TrainConfig,
    noise_model: NoiseModel,
    seeds=(0, 1, 2),
) -> dict:
    """Train the four component configurations and report PSNR per row.

    Uses the train-on-target mode: each run trains on `noisy` and is scored
    against `clean`. Returns {"rows": [...], "psnr": {row: [per-seed]},
    "mean_psnr": {row: float}}.
    """
    results: dict = {"rows": [name for name, _ in ABLATION_ROWS], "psnr": {}, "mean_psnr": {}}
    for name, toggles in ABLATION_ROWS:
        scores = []
        for seed in seeds:
            cfg = replace(config, component_toggles=toggles, seed=seed)
            res = train(noisy, cfg, noise_model)
            den = denoise_sequence(res.model, res.flow_estimator, noisy.frames, noise_model)
            scores.append(psnr(clean.frames, den))
        results["psnr"][name] = scores
        results["mean_psnr"][name] = float(np.mean(scores))
    return results
