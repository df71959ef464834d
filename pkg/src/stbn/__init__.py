"""Self-supervised video denoising with a spatiotemporal blind-spot network."""

from .blindspot import BlindSpotLayerConfig, BSABlock, DependencyMap, MaskedConv2d, probe_dependency
from .estimator import STBNDenoiser
from .flow import DistillationConfig, FlowEstimatorConfig, distillation_loss, estimate_flow, make_teacher_flows
from .metrics import EvalReport, evaluate, psnr, ssim
from .model import BlindSpotViolation, ModelConfig, STBNVideoModel
from .propagation import BidirectionalPropagation, BlindSpotState
from .srfe import SRFE, SRFEConfig, patch_shuffle, patch_unshuffle
from .train import (
    ComponentToggles,
    GaussianPrediction,
    TrainConfig,
    TrainingDiverged,
    denoise,
    l2_blind_loss,
    load_checkpoint,
    nll_loss,
    posterior_mean,
    run_ablation,
    save_checkpoint,
    split_prediction,
    train,
    verify_risk_gap,
)
from .videodata import NoiseModel, VideoSequence, add_awgn, crop_training_batch, load_sequence, make_translating_texture, save_sequence
from .warp import FlowField, WarpReport, audit_noise_statistics, warp, zero_flow

__version__ = "0.1.0"

__all__ = [
    "BSABlock",
    "BidirectionalPropagation",
    "BlindSpotLayerConfig",
    "BlindSpotState",
    "BlindSpotViolation",
    "ComponentToggles",
    "DependencyMap",
    "DistillationConfig",
    "EvalReport",
    "FlowEstimatorConfig",
    "FlowField",
    "GaussianPrediction",
    "MaskedConv2d",
    "ModelConfig",
    "NoiseModel",
    "STBNDenoiser",
    "STBNVideoModel",
    "SRFE",
    "SRFEConfig",
    "TrainConfig",
    "TrainingDiverged",
    "VideoSequence",
    "WarpReport",
    "add_awgn",
    "audit_noise_statistics",
    "crop_training_batch",
    "denoise",
    "distillation_loss",
    "estimate_flow",
    "evaluate",
    "l2_blind_loss",
    "load_checkpoint",
    "load_sequence",
    "make_teacher_flows",
    "make_translating_texture",
    "nll_loss",
    "patch_shuffle",
    "patch_unshuffle",
    "posterior_mean",
    "probe_dependency",
    "psnr",
    "run_ablation",
    "save_checkpoint",
    "save_sequence",
    "split_prediction",
    "ssim",
    "train",
    "verify_risk_gap",
    "warp",
    "zero_flow",
]
