"""MAKNet: a desk-scale mixed-asymmetric-kernel CNN with a self-contained
reverse-mode autodiff core, noisy-student semi-supervised training, and an
attribution/perturbation interpretability toolkit.
"""

from .tensor import Tensor, ShapeError, no_grad, set_default_dtype, set_debug_checks
from .arch import (
    MakConvSpec,
    DenseBlockSpec,
    ModelConfig,
    MakNet,
    build_maknet,
    build_plain_baseline,
    count_params,
    param_report,
)
from .optim import FocalLossConfig, RangerConfig, focal_loss, ranger

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "set_default_dtype",
    "set_debug_checks",
    "MakConvSpec",
    "DenseBlockSpec",
    "ModelConfig",
    "MakNet",
    "build_maknet",
    "build_plain_baseline",
    "count_params",
    "param_report",
    "FocalLossConfig",
    "RangerConfig",
    "focal_loss",
    "ranger",
    "__version__",
]
