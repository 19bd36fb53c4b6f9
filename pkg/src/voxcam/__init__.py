"""3D residual networks for volumetric lesion classification, with
layer-level class activation maps and a lesion attention score."""

from .errors import DataError, DegeneracyError, VoxcamError
from .explain import (
    Heatmap,
    HeatScoreResult,
    LesionMask,
    grad_cam,
    heat_score,
    heat_score_aggregate,
    min_max_normalize,
)
from .manifest import ManifestRow, read_manifest, write_manifest
from .nifti import read_nifti, write_nifti
from .checkpoint import load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_cohort, generate_phantom
from .resnet import ModelSpec, Model, build_model, spec_from_state
from .stats import accuracy, paired_t_test, roc_auc, summarize_runs
from .tensor import Tensor, backward, conv3d, cross_entropy, no_grad
from .train import Adam, FoldSplit, TrainConfig, make_folds, train_fold, zscore_normalize
from .volume import Volume, rotate_volume, trilinear_resample

__version__ = "0.1.0"

__all__ = [
    "VoxcamError",
    "DataError",
    "DegeneracyError",
    "Volume",
    "rotate_volume",
    "trilinear_resample",
    "Tensor",
    "backward",
    "conv3d",
    "cross_entropy",
    "no_grad",
    "ModelSpec",
    "Model",
    "build_model",
    "spec_from_state",
    "TrainConfig",
    "FoldSplit",
    "Adam",
    "make_folds",
    "train_fold",
    "zscore_normalize",
    "Heatmap",
    "LesionMask",
    "HeatScoreResult",
    "grad_cam",
    "min_max_normalize",
    "heat_score",
    "heat_score_aggregate",
    "accuracy",
    "roc_auc",
    "paired_t_test",
    "summarize_runs",
    "read_nifti",
    "write_nifti",
    "save_checkpoint",
    "load_checkpoint",
    "read_manifest",
    "write_manifest",
    "ManifestRow",
    "PhantomSpec",
    "generate_phantom",
    "generate_cohort",
    "__version__",
]
