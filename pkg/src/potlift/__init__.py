"""potlift: a two-stage transformer for lifting 2D human poses to 3D.

Stage I is a pose-oriented transformer that predicts a 3D pose and a per-joint
uncertainty; stage II refines that pose with uncertainty-guided attention.
Everything runs on a small numpy autodiff core, with numba kernels for the
hot loops (set ``POTLIFT_NUMBA=0`` to force the pure-numpy path).
"""

from .errors import PotliftError
from .model import ModelConfig, PotModel, UgrnModel, build_models, infer, param_count
from .numerics import Rng, Tape, Tensor
from .skeleton import Skeleton, build_skeleton, distance_matrix, h36m_skeleton
from .training import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "PotModel", "PotliftError", "Rng", "Skeleton", "Tape", "Tensor", "TrainConfig", "UgrnModel",
    "build_models", "build_skeleton", "distance_matrix", "h36m_skeleton", "infer", "param_count",
    "train_stage1", "train_stage2",
]  # fmt: skip
