"""Activity frames and a glimpse-based attention classifier for wearable sensor windows."""

from .ablation import compare_layouts
from .data import DatasetConfig, builtin_config, loso_splits, make_windows, map_labels, subsample_labeled
from .estimator import ActivityFrameTransformer, RAAFClassifier
from .exceptions import ConfigError, DataError, DimensionError, NumericError, RAAFError, StateError
from .frames import FrameLayout, build_frame, build_permutation, expand_row, window_to_sample
from .model import ModelConfig, RAAFNetwork
from .training import TrainConfig, evaluate, fit_network, run_loso, sweep_labeled_data

__version__ = "0.1.0"

__all__ = [
    "ActivityFrameTransformer", "ConfigError", "DataError", "DatasetConfig", "DimensionError", "FrameLayout",
    "ModelConfig", "NumericError", "RAAFClassifier", "RAAFError", "RAAFNetwork", "StateError", "TrainConfig",
    "build_frame", "build_permutation", "builtin_config", "compare_layouts", "evaluate", "expand_row", "fit_network",
    "loso_splits", "make_windows", "map_labels", "run_loso", "subsample_labeled", "sweep_labeled_data",
    "window_to_sample",
]
