"""Differentiable keypoint selection for two-modality scene classification.

Everything is plain NumPy float64 with explicit forward/backward pairs.
"""

from .config import ModelConfig, TrainConfig, load_run_config, parse_run_config
from .harness import MetricsReport, evaluate, keypoint_localization_metric, lr_at, train
from .gradcheck import gradcheck_suite
from .model import build_model, load_checkpoint, model_forward, save_checkpoint
from .selection import DlfsConfig
from .synth import SceneExample, SceneGeometry, SynthConfig, gen_dataset, gen_scene, load_dataset
from .tensor import Rng, load_tensor, save_tensor

__all__ = [
    "DlfsConfig",
    "MetricsReport",
    "ModelConfig",
    "Rng",
    "SceneExample",
    "SceneGeometry",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "evaluate",
    "gen_dataset",
    "gen_scene",
    "gradcheck_suite",
    "keypoint_localization_metric",
    "load_checkpoint",
    "load_dataset",
    "load_run_config",
    "load_tensor",
    "lr_at",
    "model_forward",
    "parse_run_config",
    "save_checkpoint",
    "save_tensor",
    "train",
]
