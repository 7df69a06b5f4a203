"""No-reference image quality assessment with interacting content and distortion pyramids."""
from .backend import active as kernel_backend
from .data import (
    DatasetDescriptor, DatasetManifest, PreprocessConfig, SampleRecord, SplitPlan, efficiency_subsets,
    leave_one_out_plans, load_manifest, make_split, normalize_labels,
)
from .encoders import (
    BackboneParams, FeaturePyramid, extract_content_pyramid, extract_distortion_pyramid, load_backbone_weights,
)
from .errors import CodiIQAError
from .head import PatchWeightedHead, fuse_pyramid, weighted_pool
from .metrics import MetricsReport, aggregate_runs, compute_report, krcc, plcc, rmse, srcc
from .model import CoDIIQA, ModelConfig, build_model
from .ppim import PPIM, StageInteractionConfig
from .trainer import FreezePolicy, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "kernel_backend",
    "DatasetDescriptor",
    "DatasetManifest",
    "PreprocessConfig",
    "SampleRecord",
    "SplitPlan",
    "efficiency_subsets",
    "leave_one_out_plans",
    "load_manifest",
    "make_split",
    "normalize_labels",
    "BackboneParams",
    "FeaturePyramid",
    "extract_content_pyramid",
    "extract_distortion_pyramid",
    "load_backbone_weights",
    "CodiIQAError",
    "PatchWeightedHead",
    "fuse_pyramid",
    "weighted_pool",
    "MetricsReport",
    "aggregate_runs",
    "compute_report",
    "krcc",
    "plcc",
    "rmse",
    "srcc",
    "CoDIIQA",
    "ModelConfig",
    "build_model",
    "PPIM",
    "StageInteractionConfig",
    "FreezePolicy",
    "TrainConfig",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
