"""Semantic-feature MMD alignment, logit distillation and recorded soft targets."""

from .distillation import DEFAULT_TEMPERATURE, kd_loss, l2_feature_loss, l2_logit_loss
from .kernels import KernelSpec, gram_matrix, median_bandwidths, mmd_loss, rbf_kernel
from .soft_targets import SoftTargetEntry, SoftTargetStats, SoftTargetStore, record_soft_targets

__all__ = [
    "DEFAULT_TEMPERATURE",
    "kd_loss",
    "l2_feature_loss",
    "l2_logit_loss",
    "KernelSpec",
    "gram_matrix",
    "median_bandwidths",
    "mmd_loss",
    "rbf_kernel",
    "SoftTargetEntry",
    "SoftTargetStats",
    "SoftTargetStore",
    "record_soft_targets",
]
