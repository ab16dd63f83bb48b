"""Image sources, task sequences, augmentation and per-task normalization."""

from .base_image_source import BaseImageSource
from .factory import ImageSourceFactory, create_source
from .folder_source import FolderImageSource
from .synthetic_source import SyntheticImageSource
from .tasks import (
    Partition,
    TaskDataset,
    TaskPartitionDataset,
    TaskSequence,
    build_sequence,
    make_loader,
)
from .transforms import NormalizationStats, augment, center_crop, compute_stats, normalize

__all__ = [
    "BaseImageSource",
    "ImageSourceFactory",
    "create_source",
    "FolderImageSource",
    "SyntheticImageSource",
    "Partition",
    "TaskDataset",
    "TaskPartitionDataset",
    "TaskSequence",
    "build_sequence",
    "make_loader",
    "NormalizationStats",
    "augment",
    "center_crop",
    "compute_stats",
    "normalize",
]
