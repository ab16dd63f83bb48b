"""Method strategies, the combined objective, training procedures and sequence runs."""

from .methods import (
    ConvVariant,
    FcVariant,
    LogitVariant,
    LossWeights,
    MethodName,
    MethodSpec,
    default_weights,
    make_method,
    parse_label,
)
from .objective import LossBreakdown, classification_loss, combined_loss, weighted_total
from .run_queue import RunItem, RunQueue, RunStatus
from .sequence import MethodOutcome, SharedStart, prepare_start, run_method, run_sequence
from .trainer import (
    TrainingLog,
    TrainSchedule,
    joint_train,
    load_task_state,
    make_discriminator_bank,
    save_task_state,
    train_task,
    warm_up,
)

__all__ = [
    "ConvVariant",
    "FcVariant",
    "LogitVariant",
    "LossWeights",
    "MethodName",
    "MethodSpec",
    "default_weights",
    "make_method",
    "parse_label",
    "LossBreakdown",
    "classification_loss",
    "combined_loss",
    "weighted_total",
    "RunItem",
    "RunQueue",
    "RunStatus",
    "MethodOutcome",
    "SharedStart",
    "prepare_start",
    "run_method",
    "run_sequence",
    "TrainingLog",
    "TrainSchedule",
    "joint_train",
    "load_task_state",
    "make_discriminator_bank",
    "save_task_state",
    "train_task",
    "warm_up",
]
