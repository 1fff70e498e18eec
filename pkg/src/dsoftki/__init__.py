"""Scalable GP regression with derivative observations via softmax
kernel interpolation with per-point temperature vectors.

The public surface re-exports the main building blocks; see the module
docstrings for the algebra and the README for worked examples.
"""

from .datasets import (
    LabeledDerivDataset,
    NormTransform,
    generate,
    load,
    normalize,
    save,
    split,
    synth_eval,
)
from .exact import (
    GpwdNoise,
    exact_gp_mll,
    exact_gp_posterior,
    exact_gpwd_mll,
    exact_gpwd_posterior,
)
from .interp import InterpField, assemble_interp, softmax_weight_grads, softmax_weights
from .kernels import KernelParams, gpwd_block, kernel_eval, kernel_matrix
from .linalg import (
    FactorizationFailed,
    LinearOperator,
    NotConverged,
    Preconditioner,
    RankDeficient,
    SpdFactor,
    cg_solve,
    cholesky_safe,
    pivoted_cholesky_precond,
    qr_thin,
)
from .model import (
    DsoftkiParams,
    FittedModel,
    LowRankGaussian,
    Unrecoverable,
    build_factor,
    fit,
    hutchinson_pseudoloss,
    load_model,
    lowrank_logpdf,
    omega_diagnostic,
    predict,
    save_model,
    stabilized_objective,
)
from .trainer import (
    OptState,
    TrainConfig,
    adam_step,
    effective_lr,
    grad_check,
    objective_gradient,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "LabeledDerivDataset",
    "NormTransform",
    "generate",
    "load",
    "normalize",
    "save",
    "split",
    "synth_eval",
    "GpwdNoise",
    "exact_gp_mll",
    "exact_gp_posterior",
    "exact_gpwd_mll",
    "exact_gpwd_posterior",
    "InterpField",
    "assemble_interp",
    "softmax_weight_grads",
    "softmax_weights",
    "KernelParams",
    "gpwd_block",
    "kernel_eval",
    "kernel_matrix",
    "FactorizationFailed",
    "LinearOperator",
    "NotConverged",
    "Preconditioner",
    "RankDeficient",
    "SpdFactor",
    "cg_solve",
    "cholesky_safe",
    "pivoted_cholesky_precond",
    "qr_thin",
    "DsoftkiParams",
    "FittedModel",
    "LowRankGaussian",
    "Unrecoverable",
    "build_factor",
    "fit",
    "hutchinson_pseudoloss",
    "load_model",
    "lowrank_logpdf",
    "omega_diagnostic",
    "predict",
    "save_model",
    "stabilized_objective",
    "OptState",
    "TrainConfig",
    "adam_step",
    "effective_lr",
    "grad_check",
    "objective_gradient",
    "train",
]
