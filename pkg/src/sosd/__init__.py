"""Spectral-stability laboratory for a single-head attention classifier."""

from sosd.config import RunConfig, load_config
from sosd.estimator import ToyAttentionClassifier
from sosd.model import (
    Batch,
    ModelConfig,
    ModelState,
    backward,
    forward,
    gen_dataset,
    init_params,
    linearized_attention,
)
from sosd.optim import OptimizerSpec, ScheduleSpec, lr_at, newton_schulz, optimizer_step
from sosd.spectral import SpectralSnapshot, cosine_similarity, matrix_norms, sd_variation, svd, trace_normalize
from sosd.telemetry import (
    ThresholdConstants,
    detect_sosd_onset,
    gap,
    phase_report,
    predict_thresholds,
    stability_bound,
)
from sosd.training import train

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ModelConfig",
    "ModelState",
    "OptimizerSpec",
    "RunConfig",
    "ScheduleSpec",
    "SpectralSnapshot",
    "ThresholdConstants",
    "ToyAttentionClassifier",
    "backward",
    "cosine_similarity",
    "detect_sosd_onset",
    "forward",
    "gap",
    "gen_dataset",
    "init_params",
    "linearized_attention",
    "load_config",
    "lr_at",
    "matrix_norms",
    "newton_schulz",
    "optimizer_step",
    "phase_report",
    "predict_thresholds",
    "sd_variation",
    "stability_bound",
    "svd",
    "trace_normalize",
    "train",
]
