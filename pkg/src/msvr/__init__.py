"""Multi-scale vehicle re-identification: model, data protocol, evaluation.

Subpackages:
    ndgrad    -- float64 tensors with reverse-mode autodiff
    backbone  -- small convolutional embedding network
    model     -- multi-branch model, consensus losses, training loop
    pyramid   -- image I/O, resizing, augmentation, pyramid building
    datakit   -- manifests, filtering, benchmark splits, synthetic data
    evalkit   -- L2 ranking, CMC/mAP metrics, evaluation reports
    cli       -- end-to-end command-line pipeline
"""

from .backbone import BackboneConfig, BackboneParams, embed, init_backbone
from .datakit import BenchmarkSplit, Trajectory, build_split, filter_trajectories
from .evalkit import EvalReport, FeatureSet, cmc, evaluate, l2_rank, mean_ap
from .model import (
    LossBreakdown,
    MsvrConfig,
    MsvrModel,
    extract_features,
    forward_batch,
    init_model,
    train,
)
from .ndgrad import Tensor
from .pyramid import Image, PyramidSample, build_pyramid, resize

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "BackboneParams",
    "BenchmarkSplit",
    "EvalReport",
    "FeatureSet",
    "Image",
    "LossBreakdown",
    "MsvrConfig",
    "MsvrModel",
    "PyramidSample",
    "Tensor",
    "Trajectory",
    "build_pyramid",
    "build_split",
    "cmc",
    "embed",
    "evaluate",
    "extract_features",
    "filter_trajectories",
    "forward_batch",
    "init_backbone",
    "init_model",
    "l2_rank",
    "mean_ap",
    "resize",
    "train",
]
