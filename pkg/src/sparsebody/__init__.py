"""Full-body pose estimation from sparse head and hand tracking."""

from .dataio import MotionSequence, synth_dataset
from .estimator import MotionFeaturizer, SparsePoseRegressor
from .evalx import MetricReport, evaluate
from .model import ModelConfig, PoseEstimate, SparsePoseNet, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "MetricReport",
    "ModelConfig",
    "MotionFeaturizer",
    "MotionSequence",
    "PoseEstimate",
    "SparsePoseNet",
    "SparsePoseRegressor",
    "TrainConfig",
    "evaluate",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "synth_dataset",
    "train",
]
