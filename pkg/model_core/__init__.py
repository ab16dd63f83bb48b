"""Decomposed backbone (F, C, C_t), activation capture, snapshots and checkpoints."""

from .backbone import (
    DEFAULT_ARCH,
    ActivationBundle,
    CapturePoints,
    InitSpec,
    ModelDecomposition,
    add_head,
    build_backbone,
    forward_capture,
)
from .snapshot import (
    FrozenSnapshot,
    load_checkpoint,
    load_snapshot,
    parameter_digest,
    save_checkpoint,
    save_snapshot,
    snapshot,
)

__all__ = [
    "DEFAULT_ARCH",
    "ActivationBundle",
    "CapturePoints",
    "InitSpec",
    "ModelDecomposition",
    "add_head",
    "build_backbone",
    "forward_capture",
    "FrozenSnapshot",
    "load_checkpoint",
    "load_snapshot",
    "parameter_digest",
    "save_checkpoint",
    "save_snapshot",
    "snapshot",
]
