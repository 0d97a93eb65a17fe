"""Feed-forward multi-view reconstruction and cached novel-view rendering.

The package turns a handful of unposed object images into (a) predicted
camera poses, (b) a sealed per-layer K/V scene cache, and (c) novel-view RGB
images and point maps rendered from that cache at arbitrary query poses.
"""

from .errors import (
    CacheNotSealedError,
    ConfigMismatchError,
    ContainerFormatError,
    DegenerateScaleError,
    EmptyCloudError,
    InvalidCameraError,
    RngtError,
    RollNotApplicableError,
    StaleCacheError,
    TrainingDivergedError,
)
from .geometry import (
    CameraPose,
    PluckerMap,
    PointCloud,
    Similarity,
    chamfer_distance,
    depth_to_pointmap,
    normalize_cameras,
    plucker_map,
    recover_up_direction,
)
from .model import ModelConfig, ModelOutputs, RngModel, load_model, save_model
from .losses import LossReport, LossWeights, total_loss
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .evaluation import BenchReport, EvalReport, efficiency_bench, evaluate_model

__all__ = [
    "BenchReport",
    "CacheNotSealedError",
    "CameraPose",
    "ConfigMismatchError",
    "ContainerFormatError",
    "DegenerateScaleError",
    "EmptyCloudError",
    "EvalReport",
    "InvalidCameraError",
    "LossReport",
    "LossWeights",
    "ModelConfig",
    "ModelOutputs",
    "PluckerMap",
    "PointCloud",
    "RngModel",
    "RngtError",
    "RollNotApplicableError",
    "Similarity",
    "StaleCacheError",
    "TrainingDivergedError",
    "chamfer_distance",
    "depth_to_pointmap",
    "efficiency_bench",
    "evaluate_model",
    "load_checkpoint",
    "load_model",
    "normalize_cameras",
    "plucker_map",
    "recover_up_direction",
    "save_checkpoint",
    "save_model",
    "total_loss",
    "train",
]
