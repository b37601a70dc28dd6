"""Knowledge-distillation toolkit built on a minimal numpy autograd engine."""

from .assignment import (
    AssignmentProblem,
    AssignmentSolution,
    oracle_smooth,
    solve_hard,
    solve_smooth,
)
from .io import Dataset, ExperimentConfig, generate_pattern_blobs, load_dataset, parse_config
from .kd_layer import KDLayerParams, init_kd_layer, kd_distill_loss, kd_forward
from .model import ARCHS, ModelSpec, SmallCNN, StudentModel, arch_spec
from .persist import load_checkpoint, load_labelers, save_checkpoint, save_labelers
from .tensor import NumericalError, ShapeError, TapeError, Tensor, backward, no_grad
from .train import (
    TrainPlan,
    build_labelers,
    evaluate,
    linear_probe,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "ARCHS",
    "AssignmentProblem",
    "AssignmentSolution",
    "Dataset",
    "ExperimentConfig",
    "KDLayerParams",
    "ModelSpec",
    "NumericalError",
    "ShapeError",
    "SmallCNN",
    "StudentModel",
    "TapeError",
    "Tensor",
    "TrainPlan",
    "arch_spec",
    "backward",
    "build_labelers",
    "evaluate",
    "generate_pattern_blobs",
    "init_kd_layer",
    "kd_distill_loss",
    "kd_forward",
    "linear_probe",
    "load_checkpoint",
    "load_dataset",
    "load_labelers",
    "no_grad",
    "oracle_smooth",
    "parse_config",
    "save_checkpoint",
    "save_labelers",
    "solve_hard",
    "solve_smooth",
    "train_student",
    "train_teacher",
    "__version__",
]
