"""Gradient-masking laboratory: tiny CNNs, bounded-head defenses, and the
white-box attacks they blunt, built on a from-scratch float64 autodiff tape.
"""

__version__ = "0.1.0"

from .attacks import (
    ATTACKS,
    AttackConfig,
    AttackOutcome,
    bim,
    bim_targeted,
    cw_l2,
    deepfool,
    fgsm,
    linf_to_l2_budget,
    loss_input_gradient,
    tgsm,
    tgsm_enhanced,
)
from .analysis import (
    evaluate_attack,
    gradient_mask_stats,
    head_probability_bounds,
    loss_surface,
    masking_ratio,
    score_bound_audit,
    select_attack_pool,
)
from .data import load_cifar10_binary, load_mnist_idx, resolve_corpus
from .defenses import DESK_PROTOCOL, VARIANTS, ZooProtocol, build_zoo, load_zoo
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DomainError,
    GradmaskError,
    ProtocolError,
    ShapeError,
    TrainingDiverged,
)
from .nn import ModelSpec, TrainConfig, conv_stack_spec, train
from .tensor import Tensor

__all__ = [
    "ATTACKS",
    "AttackConfig",
    "AttackOutcome",
    "CheckpointError",
    "ConfigError",
    "DESK_PROTOCOL",
    "DataFormatError",
    "DomainError",
    "GradmaskError",
    "ModelSpec",
    "ProtocolError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "VARIANTS",
    "ZooProtocol",
    "bim",
    "bim_targeted",
    "build_zoo",
    "conv_stack_spec",
    "cw_l2",
    "deepfool",
    "evaluate_attack",
    "fgsm",
    "gradient_mask_stats",
    "head_probability_bounds",
    "linf_to_l2_budget",
    "load_cifar10_binary",
    "load_mnist_idx",
    "load_zoo",
    "loss_input_gradient",
    "loss_surface",
    "masking_ratio",
    "resolve_corpus",
    "score_bound_audit",
    "select_attack_pool",
    "tgsm",
    "tgsm_enhanced",
    "train",
]
