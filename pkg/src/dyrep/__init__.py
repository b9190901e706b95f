"""Dynamic structural re-parameterization of convnets during training, in numpy."""

__version__ = "0.1.0"

from .block import BranchKind, DyRepBlock
from .grow_prune import DepConfig, GrowConfig, dep_pass, expand
from .models import ModelSpec, build_model
from .rep import collapse_block
from .trainer import TrainConfig, deploy, evaluate, train

__all__ = [
    "BranchKind", "DyRepBlock", "DyRepClassifier", "DepConfig", "GrowConfig", "ModelSpec", "TrainConfig",
    "build_model", "collapse_block", "dep_pass", "deploy", "evaluate", "expand", "train",
]


def __getattr__(name):
    # scikit-learn is only imported when the estimator is asked for
    if name == "DyRepClassifier":
        from .estimator import DyRepClassifier
        return DyRepClassifier
    raise AttributeError(f"module 'dyrep' has no attribute {name!r}")
