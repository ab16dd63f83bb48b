"""
Recorded soft targets for the frozen snapshot.

Before a new task starts, the snapshot's responses on that task's (un-augmented) training
inputs are recorded once: old-head logits, the semantic feature h* and the normalized
attention maps z*. The store is write-once per (task-id, sample-id) and is only consulted
when training runs without augmentation; with augmentation the targets are recomputed
on the augmented view.

Key Features:
- Thread-safe, write-once entries keyed by (task_id, sample_id)
- Per-task grouping and hit/miss statistics
- Round-trip exact persistence through torch.save archives
"""

import logging
import pickle
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import torch
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from attention_align.attention import with_attention
from common.errors import CheckpointError, ValidationError
from model_core.snapshot import FrozenSnapshot

logger = logging.getLogger(__name__)

SOFT_TARGET_FORMAT_VERSION = 1

Key = Tuple[int, int]


@dataclass
class SoftTargetEntry:
  """Snapshot responses for one training input of one task."""
  task_id: int
  sample_id: int
  logits: Dict[int, Tensor]
  semantic_feature: Tensor
  attention_maps: Dict[str, Tensor] = field(default_factory=dict)

  def __post_init__(self):
    if not self.logits:
      raise ValidationError("A soft-target entry needs logits from at least one old head")

  def to_dict(self) -> Dict[str, Any]:
    return {
        "task_id": self.task_id,
        "sample_id": self.sample_id,
        "logits": dict(self.logits),
        "semantic_feature": self.semantic_feature,
        "attention_maps": dict(self.attention_maps),
    }


@dataclass
class SoftTargetStats:
  """Usage counters for a SoftTargetStore."""
  total_entries: int = 0
  total_hits: int = 0
  total_misses: int = 0
  tasks: Dict[int, int] = field(default_factory=dict)

  def get_hit_rate(self) -> float:
    total_requests = self.total_hits + self.total_misses
    if total_requests == 0:
      return 0.0
    return (self.total_hits / total_requests) * 100

  def to_dict(self) -> Dict[str, Any]:
    return {
        "total_entries": self.total_entries,
        "total_hits": self.total_hits,
        "total_misses": self.total_misses,
        "hit_rate_percent": self.get_hit_rate(),
        "tasks": dict(self.tasks),
    }


class SoftTargetStore:
  """
  Write-once store of recorded snapshot responses.

  All methods may be called from several threads; writes are expected from a single
  recorder before training starts.
  """

  def __init__(self):
    self._entries: Dict[Key, SoftTargetEntry] = {}
    self._lock = threading.RLock()
    self._hits = 0
    self._misses = 0

  def __len__(self) -> int:
    with self._lock:
      return len(self._entries)

  def put(self, entry: SoftTargetEntry) -> None:
    """
    Add an entry.

    Raises:
        ValidationError: An entry for the same (task_id, sample_id) already exists
    """
    key = (int(entry.task_id), int(entry.sample_id))
    with self._lock:
      if key in self._entries:
        raise ValidationError(f"Soft targets for task {key[0]} sample {key[1]} are already recorded")
      self._entries[key] = entry

  def get(self, task_id: int, sample_id: int) -> Optional[SoftTargetEntry]:
    with self._lock:
      entry = self._entries.get((int(task_id), int(sample_id)))
      if entry is None:
        self._misses += 1
      else:
        self._hits += 1
      return entry

  def get_batch(self, task_id: int, sample_ids: Iterable[int]) -> Tuple[Dict[int, Tensor], Tensor, Dict[str, Tensor]]:
    """
    Stack the entries of a batch in the given order.

    Returns:
        Tuple: (logits per old head, semantic features, attention maps per tap)

    Raises:
        KeyError: A sample was never recorded
    """
    entries: List[SoftTargetEntry] = []
    for sample_id in sample_ids:
      entry = self.get(task_id, int(sample_id))
      if entry is None:
        raise KeyError(f"No soft targets for task {task_id} sample {int(sample_id)}")
      entries.append(entry)
    logits = {head: torch.stack([e.logits[head] for e in entries]) for head in entries[0].logits}
    semantic = torch.stack([e.semantic_feature for e in entries])
    maps = {tap: torch.stack([e.attention_maps[tap] for e in entries]) for tap in entries[0].attention_maps}
    return logits, semantic, maps

  def task_ids(self) -> List[int]:
    with self._lock:
      return sorted({task for task, _ in self._entries})

  def entries(self, task_id: Optional[int] = None) -> List[SoftTargetEntry]:
    """Entries sorted by key, optionally restricted to one task."""
    with self._lock:
      return [self._entries[key] for key in sorted(self._entries) if task_id is None or key[0] == task_id]

  @property
  def logit_record_count(self) -> int:
    """Number of recorded (sample, old head) logit vectors."""
    with self._lock:
      return sum(len(entry.logits) for entry in self._entries.values())

  def get_stats(self) -> SoftTargetStats:
    with self._lock:
      tasks: Dict[int, int] = {}
      for task, _ in self._entries:
        tasks[task] = tasks.get(task, 0) + 1
      return SoftTargetStats(total_entries=len(self._entries), total_hits=self._hits,
                             total_misses=self._misses, tasks=tasks)

  def save(self, path: Union[str, Path]) -> Path:
    """Write the store as a torch archive; load() restores it exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with self._lock:
      archive = {
          "format_version": SOFT_TARGET_FORMAT_VERSION,
          "entries": [entry.to_dict() for entry in self.entries()],
      }
    torch.save(archive, path)
    logger.info("Saved %d soft-target entries to %s", len(archive["entries"]), path)
    return path

  @classmethod
  def load(cls, path: Union[str, Path]) -> "SoftTargetStore":
    """
    Raises:
        CheckpointError: Missing or corrupt archive
    """
    path = Path(path)
    if not path.is_file():
      raise CheckpointError(f"Soft-target archive not found: {path}")
    try:
      archive = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, ValueError, AttributeError, pickle.UnpicklingError) as e:
      logger.error("Failed to read soft-target archive %s: %s", path, str(e))
      raise CheckpointError(f"Corrupt soft-target archive {path}: {e}") from e
    if not isinstance(archive, dict) or archive.get("format_version") != SOFT_TARGET_FORMAT_VERSION:
      raise CheckpointError(f"Unsupported soft-target archive format in {path}")

    store = cls()
    for raw in archive["entries"]:
      store.put(SoftTargetEntry(**raw))
    return store


def record_soft_targets(snapshot: FrozenSnapshot,
                        dataset: Dataset,
                        task_id: int,
                        batch_size: int = 64,
                        store: Optional[SoftTargetStore] = None) -> SoftTargetStore:
  """
  Record the snapshot's responses on a new task's training inputs.

  Args:
      snapshot: Frozen pre-task model; logits come from every one of its heads
      dataset: Un-augmented training partition yielding (image, label, sample_id)
      task_id: New task the inputs belong to
      batch_size: Inference batch size (does not affect the recorded values)
      store: Existing store to add to; a fresh one when None

  Returns:
      SoftTargetStore: Store holding one entry per training input

  Raises:
      ValidationError: Empty dataset or a snapshot without heads
  """
  if len(dataset) == 0:
    raise ValidationError(f"Cannot record soft targets for task {task_id}: empty dataset")
  if snapshot.num_heads < 1:
    raise ValidationError("Snapshot has no heads to record")

  store = store if store is not None else SoftTargetStore()
  loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
  recorded = 0
  for images, _, sample_ids in loader:
    bundle = with_attention(snapshot.forward_capture(images))
    maps = bundle.attention_taps
    for row, sample_id in enumerate(sample_ids.tolist()):
      store.put(SoftTargetEntry(
          task_id=task_id,
          sample_id=int(sample_id),
          logits={head: logits[row].clone() for head, logits in bundle.logits_per_head.items()},
          semantic_feature=bundle.semantic_feature[row].clone(),
          attention_maps={tap: m[row].clone() for tap, m in maps.items()}
      ))
      recorded += 1

  logger.info("Recorded soft targets for task %d: %d inputs x %d old heads", task_id, recorded, snapshot.num_heads)
  return store
