"""Virtual-branch ensembles for metric learning on a small numpy autodiff core."""

from .branching import BranchPlan, BranchedModel, ModelConfig, build_model, make_partition
from .datapipe import Dataset, generate_synthetic
from .errors import VBranchError
from .evaluator import evaluate
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BranchPlan", "BranchedModel", "ModelConfig", "build_model", "make_partition",
    "Dataset", "generate_synthetic", "VBranchError", "evaluate", "TrainConfig", "train",
]
