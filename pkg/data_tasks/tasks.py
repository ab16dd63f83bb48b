"""
Task sequences carved from an image source.

The source's classes are split into n_tasks disjoint groups; each group becomes a task with
its own label space (labels 0..k-1 in group order) and its own output head. Every class is
split into train/val/test partitions, and normalization statistics are computed on the
task's training partition only.

Sample ids are stable across runs: class_index * SAMPLE_ID_STRIDE + index within the class.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import torch
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from common.errors import ConfigurationError, ValidationError
from common.seeding import make_generator
from .base_image_source import BaseImageSource
from .transforms import NormalizationStats, augment, center_crop, compute_stats, normalize

logger = logging.getLogger(__name__)

SAMPLE_ID_STRIDE = 1_000_000
TRAIN, VAL, TEST = "train", "val", "test"


@dataclass
class Partition:
  """Raw [0, 1] images with task-local labels and global sample ids."""
  images: Tensor
  labels: Tensor
  sample_ids: Tensor

  def __post_init__(self):
    if not self.images.shape[0] == self.labels.shape[0] == self.sample_ids.shape[0]:
      raise ValidationError("Partition tensors must have the same length")

  def __len__(self) -> int:
    return int(self.labels.shape[0])


@dataclass
class TaskDataset:
  """One task: disjoint train/val/test partitions and train-split normalization stats."""
  task_id: int
  class_count: int
  class_names: List[str]
  train: Partition
  val: Partition
  test: Partition
  stats: NormalizationStats

  def __post_init__(self):
    if self.class_count != len(self.class_names) or self.class_count < 1:
      raise ValidationError(f"Task {self.task_id}: class_count does not match its class names")
    for name in (TRAIN, VAL, TEST):
      labels = self.partition(name).labels
      if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= self.class_count):
        raise ValidationError(f"Task {self.task_id}: {name} labels outside [0, {self.class_count})")

  def partition(self, split: str) -> Partition:
    if split not in (TRAIN, VAL, TEST):
      raise ValidationError(f"Unknown split {split!r}")
    return getattr(self, split)

  def dataset(self, split: str, augment_images: bool = False, seed: int = 0,
              eval_crop: float = 1.0) -> "TaskPartitionDataset":
    """Dataset over one split; augmentation only makes sense on the train split."""
    return TaskPartitionDataset(self.partition(split), self.stats, self.task_id,
                                augment_images=augment_images, seed=seed, eval_crop=eval_crop)

  def describe(self) -> Dict[str, Any]:
    return {"id": self.task_id, "classes": self.class_count, "class_names": list(self.class_names),
            "sizes": {name: len(self.partition(name)) for name in (TRAIN, VAL, TEST)}}


@dataclass
class TaskSequence:
  """Ordered tasks plus the seed and source descriptor that produced them."""
  tasks: List[TaskDataset]
  seed: int
  source_descriptor: Dict[str, Any] = field(default_factory=dict)

  def __post_init__(self):
    ids = [task.task_id for task in self.tasks]
    if len(set(ids)) != len(ids):
      raise ValidationError(f"Task ids must be unique, got {ids}")

  def __len__(self) -> int:
    return len(self.tasks)

  def __iter__(self) -> Iterator[TaskDataset]:
    return iter(self.tasks)

  def __getitem__(self, index: int) -> TaskDataset:
    return self.tasks[index]

  @property
  def class_counts(self) -> List[int]:
    return [task.class_count for task in self.tasks]


class TaskPartitionDataset(Dataset):
  """
  Map-style dataset yielding (normalized image, label, sample_id).

  With augmentation on, each item draws from a generator derived from
  (seed, task, epoch, sample_id); call set_epoch() before each epoch.
  """

  def __init__(self,
               partition: Partition,
               stats: NormalizationStats,
               task_id: int,
               augment_images: bool = False,
               seed: int = 0,
               eval_crop: float = 1.0):
    self.partition = partition
    self.stats = stats
    self.task_id = task_id
    self.augment_images = augment_images
    self.seed = seed
    self.eval_crop = eval_crop
    self.epoch = 0

  def set_epoch(self, epoch: int) -> None:
    self.epoch = int(epoch)

  def __len__(self) -> int:
    return len(self.partition)

  def __getitem__(self, index: int):
    image = self.partition.images[index]
    sample_id = int(self.partition.sample_ids[index])
    if self.augment_images:
      image = augment(image, make_generator(self.seed, "augment", self.task_id, self.epoch, sample_id))
    else:
      image = center_crop(image, self.eval_crop)
    return normalize(image, self.stats), self.partition.labels[index], sample_id


def make_loader(dataset: Dataset, batch_size: int, seed: int, *keys, shuffle: bool = True) -> DataLoader:
  """Single-process loader whose order is fixed by (seed, *keys)."""
  generator = make_generator(seed, "loader", *keys) if shuffle else None
  return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator, num_workers=0)


def _load_manifest(manifest: Union[str, Path, Dict[str, Any]]) -> List[List[str]]:
  if isinstance(manifest, (str, Path)):
    try:
      manifest = json.loads(Path(manifest).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
      raise ConfigurationError(f"Cannot read task manifest {manifest}: {e}") from e
  groups = manifest.get("tasks") if isinstance(manifest, dict) else None
  if not isinstance(groups, list) or not all(isinstance(g, list) for g in groups):
    raise ConfigurationError("Task manifest must be an object with a 'tasks' list of class-name lists")
  return groups


def _class_groups(class_names: Sequence[str], n_tasks: int, seed: int,
                  manifest: Optional[Union[str, Path, Dict[str, Any]]]) -> List[List[int]]:
  if manifest is not None:
    groups = _load_manifest(manifest)
    if len(groups) != n_tasks:
      raise ConfigurationError(f"Manifest declares {len(groups)} tasks, expected {n_tasks}")
    seen = set()
    indices = []
    for group in groups:
      if not group:
        raise ConfigurationError("Manifest task with no classes")
      for name in group:
        if name not in class_names:
          raise ConfigurationError(f"Manifest class {name!r} not found in source")
        if name in seen:
          raise ConfigurationError(f"Manifest class {name!r} appears in more than one task")
        seen.add(name)
      indices.append([class_names.index(name) for name in group])
    return indices

  order = torch.randperm(len(class_names), generator=make_generator(seed, "class_split")).tolist()
  base, extra = divmod(len(class_names), n_tasks)
  groups, start = [], 0
  for task in range(n_tasks):
    size = base + (1 if task < extra else 0)
    groups.append(sorted(order[start:start + size]))
    start += size
  return groups


def _split_counts(total: int, val_fraction: float, test_fraction: float) -> tuple:
  n_test = max(1, int(round(total * test_fraction)))
  n_val = max(1, int(round(total * val_fraction)))
  n_train = total - n_test - n_val
  if n_train < 1:
    raise ConfigurationError(f"A class with {total} images is too small for the val/test split")
  return n_train, n_val, n_test


def build_sequence(source: BaseImageSource,
                   n_tasks: int,
                   seed: int,
                   val_fraction: float = 0.1,
                   test_fraction: float = 0.2,
                   manifest: Optional[Union[str, Path, Dict[str, Any]]] = None) -> TaskSequence:
  """
  Split a source into a task sequence.

  Args:
      source: Image source
      n_tasks: Number of tasks
      seed: Controls the class assignment and the per-class partitions
      val_fraction: Share of each class held out for validation
      test_fraction: Share of each class held out for testing
      manifest: Optional {"tasks": [[class names], ...]} (dict or JSON path) replacing the
                seeded class assignment

  Returns:
      TaskSequence: Tasks with ids 0..n_tasks-1

  Raises:
      ConfigurationError: Fewer than 2 * n_tasks classes, bad manifest, or tiny classes
  """
  if n_tasks < 1:
    raise ConfigurationError("n_tasks must be at least 1")
  if not (0 < val_fraction < 1 and 0 < test_fraction < 1 and val_fraction + test_fraction < 1):
    raise ConfigurationError("val_fraction and test_fraction must be in (0, 1) and sum below 1")
  class_names = source.class_names()
  if len(class_names) < 2 * n_tasks:
    raise ConfigurationError(f"Source has {len(class_names)} classes; {n_tasks} tasks need at least {2 * n_tasks}")

  tasks = []
  for task_id, group in enumerate(_class_groups(class_names, n_tasks, seed, manifest)):
    parts: Dict[str, Dict[str, List[Tensor]]] = {name: {"images": [], "labels": [], "ids": []}
                                                 for name in (TRAIN, VAL, TEST)}
    for label, class_index in enumerate(group):
      images = source.load_class(class_index)
      n_train, n_val, _ = _split_counts(images.shape[0], val_fraction, test_fraction)
      order = torch.randperm(images.shape[0], generator=make_generator(seed, "partition", class_names[class_index]))
      bounds = {TRAIN: order[:n_train], VAL: order[n_train:n_train + n_val], TEST: order[n_train + n_val:]}
      for name, chosen in bounds.items():
        chosen = chosen.sort().values
        parts[name]["images"].append(images[chosen])
        parts[name]["labels"].append(torch.full((len(chosen),), label, dtype=torch.long))
        parts[name]["ids"].append(class_index * SAMPLE_ID_STRIDE + chosen.to(torch.long))

    partitions = {
        name: Partition(torch.cat(p["images"]), torch.cat(p["labels"]), torch.cat(p["ids"]))
        for name, p in parts.items()
    }
    tasks.append(TaskDataset(
        task_id=task_id,
        class_count=len(group),
        class_names=[class_names[i] for i in group],
        train=partitions[TRAIN],
        val=partitions[VAL],
        test=partitions[TEST],
        stats=compute_stats(partitions[TRAIN].images)
    ))
    logger.info("Task %d: classes %s, %d/%d/%d train/val/test", task_id, tasks[-1].class_names,
                len(partitions[TRAIN]), len(partitions[VAL]), len(partitions[TEST]))

  return TaskSequence(tasks=tasks, seed=seed, source_descriptor=source.describe())
