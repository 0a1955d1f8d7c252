"""Quantization-space utilization and learnable orthogonal/scaling
transforms, exercised on synthetic Gaussians and a toy transformer."""

from .errors import (
    NumericalError,
    TensorFormatError,
    TokenFileError,
    UnsupportedDimensionError,
    ValidationError,
)
from .linalg import eig_symmetric, gaussian_sample, hadamard
from .losses import LossConfig, cross_entropy, kl_top, kl_top_with_grad
from .pipeline import (
    RunConfig,
    load_params,
    optimize,
    run_baseline,
    run_demo,
    run_optimize,
    run_rtn_baseline,
    save_params,
)
from .qsur import (
    GaussianStats,
    QsurReport,
    fit_gaussian,
    gaussian_stats,
    max_qsur,
    qsur,
    qsur_monte_carlo,
    qsur_normalized,
    qsur_simplified,
    transform_stats,
)
from .quantizer import QuantConfig, QuantSpec, fake_quantize, fake_quantize_ste, rtn_config
from .rng import Rng
from .special import chi2_cdf, chi2_quantile, gamma_p, log_gamma
from .stiefel import (
    ScaleParam,
    StiefelParam,
    adam_step_scale,
    cayley_retract,
    cayley_sgd_step,
    cosine_lr,
    riemann_adam_step,
    riemannian_grad,
)
from .tensorio import read_tensor, write_tensor
from .toy_model import (
    OstParams,
    ToyBlock,
    ToyBlockConfig,
    backward_ost,
    collect_qsur,
    fold_rmsnorm,
    forward,
    fuse,
    identity_ost,
    init_block,
    random_ost,
)
from .transforms import (
    TransformPair,
    apply_pair,
    best_orthogonal,
    best_transform,
    orthogonality_residual,
    random_orthogonal,
    womi_init,
)

__version__ = "0.1.0"

__all__ = [
    "GaussianStats",
    "LossConfig",
    "NumericalError",
    "OstParams",
    "QsurReport",
    "QuantConfig",
    "QuantSpec",
    "Rng",
    "RunConfig",
    "ScaleParam",
    "StiefelParam",
    "TensorFormatError",
    "TokenFileError",
    "ToyBlock",
    "ToyBlockConfig",
    "TransformPair",
    "UnsupportedDimensionError",
    "ValidationError",
    "adam_step_scale",
    "apply_pair",
    "backward_ost",
    "best_orthogonal",
    "best_transform",
    "cayley_retract",
    "cayley_sgd_step",
    "chi2_cdf",
    "chi2_quantile",
    "collect_qsur",
    "cosine_lr",
    "cross_entropy",
    "eig_symmetric",
    "fake_quantize",
    "fake_quantize_ste",
    "fit_gaussian",
    "fold_rmsnorm",
    "forward",
    "fuse",
    "gamma_p",
    "gaussian_sample",
    "gaussian_stats",
    "hadamard",
    "identity_ost",
    "init_block",
    "kl_top",
    "kl_top_with_grad",
    "load_params",
    "log_gamma",
    "max_qsur",
    "optimize",
    "orthogonality_residual",
    "qsur",
    "qsur_monte_carlo",
    "qsur_normalized",
    "qsur_simplified",
    "random_orthogonal",
    "random_ost",
    "read_tensor",
    "riemann_adam_step",
    "riemannian_grad",
    "rtn_config",
    "run_baseline",
    "run_demo",
    "run_optimize",
    "run_rtn_baseline",
    "save_params",
    "transform_stats",
    "womi_init",
    "write_tensor",
]
