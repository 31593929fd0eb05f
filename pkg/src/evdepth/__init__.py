"""Event-guided depth completion on CPU.

The package is self-contained: a reverse-mode autodiff core verified against
finite differences, modulated deformable convolution, event-conditioned
alignment and filtering blocks, a synthetic dynamic-scene/event generator,
and a train/eval command line.
"""

from .autodiff import Variable, no_grad
from .datagen import SceneSpec, Sample, generate_dataset, load_dataset
from .events import EventStream, voxelize, window_select
from .metrics import MetricsReport, compute_metrics
from .network import (ABLATION_PRESETS, DepthCompletionModel, NetworkConfig,
                      ablation_config)
from .optim import ScheduleConfig, lr_at
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ABLATION_PRESETS",
    "DepthCompletionModel",
    "EventStream",
    "MetricsReport",
    "NetworkConfig",
    "Sample",
    "SceneSpec",
    "ScheduleConfig",
    "TrainConfig",
    "Variable",
    "ablation_config",
    "compute_metrics",
    "evaluate",
    "generate_dataset",
    "load_dataset",
    "lr_at",
    "no_grad",
    "train",
    "voxelize",
    "window_select",
    "__version__",
]
