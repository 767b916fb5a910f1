"""Few-shot segmentation with masked cross-image encoding, on a numpy autodiff core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SyntheticTaskConfig, generate_dataset, sample_episode, split_folds
from .metrics import IoUAccumulator, MetricsReport
from .model import ABLATIONS, FewShotSegmenter, ModelConfig
from .tensor import ContractError, Tensor
from .train import EvalConfig, TrainConfig, evaluate, run_ablations, train

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "ContractError", "EvalConfig", "FewShotSegmenter", "IoUAccumulator", "MetricsReport",
    "ModelConfig", "RunConfig", "SyntheticTaskConfig", "Tensor", "TrainConfig", "evaluate",
    "generate_dataset", "load_checkpoint", "run_ablations", "sample_episode", "save_checkpoint",
    "split_folds", "train",
]
