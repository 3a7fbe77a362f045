"""Spatio-thermal depth correction for RGB-D cameras.

Corrects systematic depth errors that vary over space and sensor temperature
by regressing per-pixel depth offsets with an exact Gaussian process over
(x, y, z, temperature) features, then applying the predicted offsets densely
per frame. A deterministic rig simulator stands in for physical captures so
the end-to-end error reduction is reproducible.
"""

from .errors import (
    CholeskyError,
    ContractError,
    DomainError,
    NumericalError,
    ThermacalError,
)
from .geometry import (
    CameraModel,
    CorrectionResult,
    DepthMap,
    GridSpec,
    align_depth_to_rgb,
    build_features,
    build_targets,
    correct_depth,
    grid_sample,
    project,
    reproject,
    reproject_map,
    rmse_xyz,
)
from .gp import (
    FittedGP,
    Hyperparams,
    OptimizeResult,
    TrainingSet,
    cross_kernel_fast,
    cross_kernel_naive,
    fit,
    gram,
    gram_naive,
    hyper_from_log,
    kernel_eval,
    log_params,
    nlml,
    nlml_grad,
    optimize_hyper,
    posterior_covariance,
    predict,
    predict_mean,
)
from .pfm import read_pfm, write_pfm
from .simulate import (
    DriftModel,
    Manifest,
    RigConfig,
    default_camera,
    generate_dataset,
    mean_depth_map,
    synth_ground_truth,
    synth_observed_frame,
)

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "CholeskyError",
    "ContractError",
    "CorrectionResult",
    "DepthMap",
    "DomainError",
    "DriftModel",
    "FittedGP",
    "GridSpec",
    "Hyperparams",
    "Manifest",
    "NumericalError",
    "OptimizeResult",
    "RigConfig",
    "ThermacalError",
    "TrainingSet",
    "align_depth_to_rgb",
    "build_features",
    "build_targets",
    "correct_depth",
    "cross_kernel_fast",
    "cross_kernel_naive",
    "default_camera",
    "fit",
    "generate_dataset",
    "gram",
    "gram_naive",
    "grid_sample",
    "hyper_from_log",
    "kernel_eval",
    "log_params",
    "mean_depth_map",
    "nlml",
    "nlml_grad",
    "optimize_hyper",
    "posterior_covariance",
    "predict",
    "predict_mean",
    "project",
    "read_pfm",
    "reproject",
    "reproject_map",
    "rmse_xyz",
    "synth_ground_truth",
    "synth_observed_frame",
    "write_pfm",
]
