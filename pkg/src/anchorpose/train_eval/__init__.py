"""Model assembly, training, evaluation and the ablation harness."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluate import Predictions, evaluate, predict
from .metrics import MetricReport, epe, mpjpe
from .model import AnchorPoseNet, build_anchors
from .optim import AdamW, clip_grad_norm
from .train import TrainingDiverged, TrainResult, train

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint", "Predictions", "evaluate",
    "predict", "MetricReport", "epe", "mpjpe", "AnchorPoseNet", "build_anchors", "AdamW",
    "clip_grad_norm", "TrainingDiverged", "TrainResult", "train",
]
