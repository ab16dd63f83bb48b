"""
Training procedures: head warm-up, per-task training with the combined objective, and the
joint-training baseline.

Every procedure uses SGD with momentum and the same stopping rule: train until validation
accuracy stops improving (or the epoch cap is reached), decay the learning rate once, train
a fixed number of further epochs, stop.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Union

import torch
from torch.nn import functional as F
from torch.utils.data import Dataset

from attention_align.discriminator import DiscriminatorBank
from common.errors import AfaError, CheckpointError, ConfigurationError, DivergenceError
from data_tasks.tasks import TRAIN, VAL, TaskDataset, make_loader
from metrics_report.metrics import evaluate
from model_core.backbone import ModelDecomposition
from model_core.snapshot import FrozenSnapshot, load_checkpoint, save_checkpoint
from semantic_align.kernels import KernelSpec
from semantic_align.soft_targets import SoftTargetStore, record_soft_targets
from .methods import MethodSpec
from .objective import LossBreakdown, classification_loss, combined_loss

logger = logging.getLogger(__name__)

ROUND_ROBIN = "round_robin"
POOLED = "pooled"


@dataclass
class TrainSchedule:
  """
  Optimizer and stopping-rule settings shared by every training phase.

  min_delta is a fraction: 0.001 is 0.1 percentage points of validation accuracy.
  max_epochs caps the pre-decay phase so exactly one decay always happens.
  """
  warmup_epochs: int = 10
  max_epochs: int = 60
  base_lr: float = 0.01
  momentum: float = 0.9
  weight_decay: float = 0.0
  batch_size: int = 64
  plateau_patience: int = 5
  min_delta: float = 0.001
  post_plateau_epochs: int = 20
  lr_decay: float = 0.1
  seed: int = 0
  temperature: float = 2.0
  d_hidden_units: int = 500
  d_lr: Optional[float] = None
  augment: bool = True
  use_cached_targets: bool = True
  eval_crop: float = 1.0
  joint_balance: str = ROUND_ROBIN

  def __post_init__(self):
    for name in ("warmup_epochs", "post_plateau_epochs"):
      if getattr(self, name) < 0:
        raise ConfigurationError(f"{name} must be non-negative")
    for name in ("max_epochs", "batch_size", "plateau_patience", "d_hidden_units"):
      if getattr(self, name) < 1:
        raise ConfigurationError(f"{name} must be at least 1")
    for name in ("base_lr", "temperature"):
      if not getattr(self, name) > 0:
        raise ConfigurationError(f"{name} must be positive")
    if self.d_lr is not None and not self.d_lr > 0:
      raise ConfigurationError("d_lr must be positive")
    if not 0 <= self.momentum < 1:
      raise ConfigurationError("momentum must be in [0, 1)")
    if not 0 < self.lr_decay < 1:
      raise ConfigurationError("lr_decay must be in (0, 1)")
    if self.min_delta < 0 or self.weight_decay < 0:
      raise ConfigurationError("min_delta and weight_decay must be non-negative")
    if self.joint_balance not in (ROUND_ROBIN, POOLED):
      raise ConfigurationError(f"joint_balance must be {ROUND_ROBIN!r} or {POOLED!r}")

  @classmethod
  def full_scale_preset(cls, **overrides) -> "TrainSchedule":
    """Full-scale values: 70 warm-up epochs, 20 epochs after the decay."""
    values = {"warmup_epochs": 70, "post_plateau_epochs": 20, "max_epochs": 200, "base_lr": 0.001}
    values.update(overrides)
    return cls(**values)

  def scaled(self, factor: float) -> "TrainSchedule":
    """Copy with the epoch counts multiplied by factor (at least one epoch each)."""
    if not factor > 0:
      raise ConfigurationError("epochs scale must be positive")

    def scale(value: int) -> int:
      return max(1, int(round(value * factor))) if value else 0
    return replace(self, warmup_epochs=scale(self.warmup_epochs), max_epochs=max(1, scale(self.max_epochs)),
                   post_plateau_epochs=scale(self.post_plateau_epochs))

  def to_dict(self) -> Dict[str, Any]:
    return asdict(self)


@dataclass
class TrainingLog:
  """Line-delimited training records: one per epoch and phase."""
  records: List[Dict[str, Any]] = field(default_factory=list)

  def append(self, **record) -> Dict[str, Any]:
    self.records.append(record)
    return record

  def extend(self, other: "TrainingLog") -> None:
    self.records.extend(other.records)

  def select(self, **criteria) -> List[Dict[str, Any]]:
    return [r for r in self.records if all(r.get(k) == v for k, v in criteria.items())]

  def write_jsonl(self, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
      for record in self.records:
        handle.write(json.dumps(record, sort_keys=True) + "\n")
    return path


class _Plateau:
  """One-shot plateau detector: decides when to decay and when to stop."""

  def __init__(self, schedule: TrainSchedule):
    self.schedule = schedule
    self.best = -math.inf
    self.stale = 0
    self.decayed_at: Optional[int] = None

  def update(self, epoch: int, val_acc: float) -> str:
    """Return "continue", "decay" or "stop" after an epoch."""
    s = self.schedule
    if self.decayed_at is None:
      if val_acc > self.best + s.min_delta:
        self.best = val_acc
        self.stale = 0
      else:
        self.stale += 1
      if self.stale >= s.plateau_patience or epoch + 1 >= s.max_epochs:
        self.decayed_at = epoch
        return "stop" if s.post_plateau_epochs == 0 else "decay"
      return "continue"
    return "stop" if epoch - self.decayed_at >= s.post_plateau_epochs else "continue"

  def to_dict(self) -> Dict[str, Any]:
    return {"best": self.best, "stale": self.stale, "decayed_at": self.decayed_at}

  def load(self, state: Dict[str, Any]) -> None:
    self.best, self.stale, self.decayed_at = state["best"], state["stale"], state["decayed_at"]


def _decay(optimizer: torch.optim.Optimizer, factor: float) -> float:
  for group in optimizer.param_groups:
    group["lr"] *= factor
  return optimizer.param_groups[0]["lr"]


def _run_schedule(schedule: TrainSchedule,
                  optimizer: torch.optim.Optimizer,
                  train_epoch: Callable[[int], Dict[str, float]],
                  validate: Callable[[], float],
                  record: Callable[..., None],
                  plateau: Optional[_Plateau] = None,
                  start_epoch: int = 0,
                  on_epoch_end: Optional[Callable[[int, _Plateau, bool], None]] = None) -> None:
  """
  Epoch loop with exactly one LR decay followed by post_plateau_epochs epochs.

  plateau and start_epoch continue an interrupted loop; on_epoch_end runs after the
  decay of each epoch with (epoch, plateau, finished).
  """
  plateau = plateau or _Plateau(schedule)
  epoch = start_epoch
  while True:
    lr = optimizer.param_groups[0]["lr"]
    components = train_epoch(epoch)
    val_acc = validate()
    decision = plateau.update(epoch, val_acc)
    decayed = decision == "decay" or (decision == "stop" and plateau.decayed_at == epoch)
    record(epoch=epoch, lr=lr, loss=components, val_acc=val_acc, lr_decayed=decayed)
    if decayed:
      new_lr = _decay(optimizer, schedule.lr_decay)
      logger.info("Validation plateau after epoch %d (best %.4f): lr -> %g", epoch, plateau.best, new_lr)
    if on_epoch_end is not None:
      on_epoch_end(epoch, plateau, decision == "stop")
    if decision == "stop":
      return
    epoch += 1


def _mean_components(rows: List[Dict[str, float]]) -> Dict[str, float]:
  if not rows:
    return {}
  keys = sorted({key for row in rows for key in row})
  return {key: sum(row.get(key, 0.0) for row in rows) / len(rows) for key in keys}


def _check_finite(breakdown: LossBreakdown, task_id: int, epoch: int, step: int) -> None:
  if not breakdown.is_finite():
    logger.error("Non-finite loss at task %d epoch %d step %d: %s", task_id, epoch, step, breakdown.components())
    raise DivergenceError(f"Training diverged at task {task_id}, epoch {epoch}, step {step}: "
                          f"components {breakdown.components()}")


def _optimizer(parameters, schedule: TrainSchedule) -> torch.optim.Optimizer:
  return torch.optim.SGD(parameters, lr=schedule.base_lr, momentum=schedule.momentum,
                         weight_decay=schedule.weight_decay)


def _val_dataset(task: TaskDataset, schedule: TrainSchedule) -> Dataset:
  return task.dataset(VAL, eval_crop=schedule.eval_crop)


def warm_up(model: ModelDecomposition,
            task: TaskDataset,
            new_head: int,
            schedule: TrainSchedule,
            log: Optional[TrainingLog] = None,
            method: str = "shared") -> ModelDecomposition:
  """
  Train only the new head with the classification loss for warmup_epochs.

  F and C run in inference mode without gradients, so they and all other heads stay
  bitwise unchanged.
  """
  model.check_head(new_head)
  head = model.task_heads[new_head]
  optimizer = _optimizer(head.parameters(), schedule)
  dataset = task.dataset(TRAIN, augment_images=schedule.augment, seed=schedule.seed, eval_crop=schedule.eval_crop)
  val_set = _val_dataset(task, schedule)

  for epoch in range(schedule.warmup_epochs):
    dataset.set_epoch(epoch)
    model.eval()
    losses = []
    for step, (images, labels, _) in enumerate(make_loader(dataset, schedule.batch_size, schedule.seed,
                                                           "warmup", task.task_id, epoch)):
      with torch.no_grad():
        features = model.shared_classifier(model.flatten(model.feature_extractor(images)))
      loss = F.cross_entropy(head(features), labels)
      breakdown = LossBreakdown(total=loss, cls=float(loss.detach()))
      _check_finite(breakdown, task.task_id, epoch, step)
      optimizer.zero_grad(set_to_none=True)
      loss.backward()
      optimizer.step()
      losses.append(breakdown.components())
    val_acc = evaluate(model, val_set, new_head)
    if log is not None:
      log.append(task=task.task_id, method=method, phase="warmup", epoch=epoch, lr=schedule.base_lr,
                 loss=_mean_components(losses), val_acc=val_acc, lr_decayed=False)
    logger.debug("Warm-up task %d epoch %d: val acc %.4f", task.task_id, epoch, val_acc)

  model.train()
  logger.info("Warm-up of head %d done after %d epochs", new_head, schedule.warmup_epochs)
  return model


TASK_STATE_KEY = "task_state"


def make_discriminator_bank(model: ModelDecomposition, schedule: TrainSchedule, task_id: int) -> DiscriminatorBank:
  """Fresh discriminator bank for one task, one discriminator per attention tap of the model."""
  return DiscriminatorBank(model.attention_tap_sizes(), seed=schedule.seed, task_id=task_id,
                           hidden_units=schedule.d_hidden_units, lr=schedule.d_lr or schedule.base_lr,
                           momentum=schedule.momentum, dtype=next(model.parameters()).dtype)


def _identity(method: MethodSpec, task: TaskDataset, schedule: TrainSchedule,
              snapshot: Optional[FrozenSnapshot]) -> Dict[str, Any]:
  return {
      "task_id": task.task_id,
      "method": method.to_dict(),
      "schedule": schedule.to_dict(),
      "snapshot_digest": snapshot.digest() if snapshot is not None else None,
  }


def save_task_state(path: Union[str, Path],
                    model: ModelDecomposition,
                    identity: Dict[str, Any],
                    epoch: int,
                    finished: bool,
                    optimizer: torch.optim.Optimizer,
                    plateau: _Plateau,
                    bank: Optional[DiscriminatorBank],
                    records: List[Dict[str, Any]]) -> Path:
  """Write a resumable per-epoch checkpoint of train_task, discriminator weights included."""
  return save_checkpoint(model, path, extra={TASK_STATE_KEY: {
      "identity": identity,
      "epoch": epoch,
      "finished": finished,
      "optimizer": optimizer.state_dict(),
      "plateau": plateau.to_dict(),
      "discriminators": bank.state_dict() if bank is not None else None,
      "rng_state": torch.get_rng_state(),
      "records": list(records),
  }})


def load_task_state(path: Union[str, Path], model: ModelDecomposition, identity: Dict[str, Any]) -> Dict[str, Any]:
  """
  Restore the model parameters and global RNG from a task checkpoint; return the task state.

  Raises:
      CheckpointError: Unreadable file, or a checkpoint of another task, method, schedule or snapshot
  """
  saved, extra = load_checkpoint(path)
  state = extra.get(TASK_STATE_KEY)
  if not isinstance(state, dict):
    raise CheckpointError(f"{path} is not a task checkpoint")
  if state.get("identity") != identity:
    raise CheckpointError(f"Task checkpoint {path} belongs to a different task, method, schedule or snapshot")
  try:
    model.load_state_dict(saved.state_dict())
  except RuntimeError as e:
    raise CheckpointError(f"Task checkpoint {path} does not fit the model: {e}") from e
  torch.set_rng_state(state["rng_state"])
  return state


def train_task(model: ModelDecomposition,
               snapshot: Optional[FrozenSnapshot],
               method: MethodSpec,
               task: TaskDataset,
               schedule: TrainSchedule,
               new_head: Optional[int] = None,
               log: Optional[TrainingLog] = None,
               kernel_spec: Optional[KernelSpec] = None,
               phase: str = "train",
               bank: Optional[DiscriminatorBank] = None,
               state_path: Optional[Union[str, Path]] = None) -> ModelDecomposition:
  """
  Train the whole model on one task with the method's combined objective.

  The adversarial variant uses `bank`, or a fresh one when none is given; pass a bank to
  keep its trained weights after the call. Recorded soft targets are used when
  augmentation is off and use_cached_targets is set.

  With state_path, a task checkpoint (model, optimizer, plateau state, discriminator
  weights, RNG state, log records) is written after every epoch. If the file already
  exists the call resumes from it: an interrupted task continues with its next epoch,
  a finished one is restored without training. Either way the result matches an
  uninterrupted run.

  Args:
      model: Live model, already warmed up on the new head
      snapshot: Model frozen before any shared-parameter update on this task
      method: Strategy and weights
      task: Task data; its task_id is the default head
      schedule: Optimizer and stopping rule
      new_head: Head to train (default task.task_id)
      log: Training log to append per-epoch records to
      kernel_spec: Fixed MMD widths (default: per-batch median heuristic)
      phase: Phase label for the log
      bank: Discriminator bank for the adversarial variant
      state_path: Task checkpoint to write after every epoch and resume from

  Returns:
      ModelDecomposition: The trained model (same object)

  Raises:
      DivergenceError: Non-finite loss
      ConfigurationError: Auxiliary weights without a snapshot
      CheckpointError: state_path exists but does not belong to this task
  """
  new_head = task.task_id if new_head is None else new_head
  model.check_head(new_head)
  weights = method.weights
  if weights.any_auxiliary and snapshot is None:
    raise ConfigurationError(f"{method.label} needs a snapshot of the pre-task model")

  if weights.uses_adversarial and bank is None:
    bank = make_discriminator_bank(model, schedule, task.task_id)

  store: Optional[SoftTargetStore] = None
  if weights.any_auxiliary and not schedule.augment and schedule.use_cached_targets:
    store = record_soft_targets(snapshot, task.dataset(TRAIN, eval_crop=schedule.eval_crop), new_head,
                                batch_size=schedule.batch_size)

  for parameter in model.parameters():
    parameter.requires_grad_(True)
  optimizer = _optimizer(model.parameters(), schedule)
  dataset = task.dataset(TRAIN, augment_images=schedule.augment, seed=schedule.seed, eval_crop=schedule.eval_crop)
  val_set = _val_dataset(task, schedule)

  identity = _identity(method, task, schedule, snapshot)
  task_log = TrainingLog()
  plateau = _Plateau(schedule)
  start_epoch = 0
  finished = False
  if state_path is not None and Path(state_path).is_file():
    state = load_task_state(state_path, model, identity)
    optimizer.load_state_dict(state["optimizer"])
    plateau.load(state["plateau"])
    if bank is not None and state["discriminators"] is not None:
      bank.load_state_dict(state["discriminators"])
    task_log.records = list(state["records"])
    start_epoch, finished = state["epoch"] + 1, state["finished"]
    logger.info("Resuming task %d with %s after epoch %d%s", task.task_id, method.label, state["epoch"],
                " (finished)" if finished else "")

  def train_epoch(epoch: int) -> Dict[str, float]:
    dataset.set_epoch(epoch)
    model.train()
    rows = []
    loader = make_loader(dataset, schedule.batch_size, schedule.seed, "train", task.task_id, epoch)
    for step, batch in enumerate(loader):
      breakdown = combined_loss(model, snapshot, bank, batch, weights, new_head, kernel_spec=kernel_spec,
                                temperature=schedule.temperature, soft_targets=store)
      _check_finite(breakdown, task.task_id, epoch, step)
      optimizer.zero_grad(set_to_none=True)
      breakdown.total.backward()
      optimizer.step()
      rows.append(breakdown.components())
    return _mean_components(rows)

  def record(**fields) -> None:
    task_log.append(task=task.task_id, method=method.label, phase=phase, **fields)
    logger.debug("Task %d %s epoch %d: %s val %.4f", task.task_id, method.label, fields["epoch"],
                 fields["loss"], fields["val_acc"])

  def checkpoint(epoch: int, current: _Plateau, done: bool) -> None:
    save_task_state(state_path, model, identity, epoch, done, optimizer, current, bank, task_log.records)

  if not finished:
    _run_schedule(schedule, optimizer, train_epoch, lambda: evaluate(model, val_set, new_head), record,
                  plateau=plateau, start_epoch=start_epoch,
                  on_epoch_end=checkpoint if state_path is not None else None)
  if log is not None:
    log.extend(task_log)

  if snapshot is not None and not snapshot.verify():
    raise AfaError("Frozen snapshot parameters changed during training")
  model.eval()
  logger.info("Finished task %d with %s", task.task_id, method.label)
  return model


class _TaggedDataset(Dataset):
  """(image, label, sample_id, task_id) view used by pooled joint training."""

  def __init__(self, dataset: Dataset, task_id: int):
    self.dataset = dataset
    self.task_id = task_id

  def __len__(self) -> int:
    return len(self.dataset)

  def __getitem__(self, index: int):
    image, label, sample_id = self.dataset[index]
    return image, label, sample_id, self.task_id


def _batches(dataset, schedule: TrainSchedule, task_id: int, epoch: int) -> Iterator:
  """Endless batches of one task; the first pass matches the per-task training order."""
  cycle = 0
  while True:
    keys = ("train", task_id, epoch) if cycle == 0 else ("train", task_id, epoch, "cycle", cycle)
    yield from make_loader(dataset, schedule.batch_size, schedule.seed, *keys)
    cycle += 1


def joint_train(model: ModelDecomposition,
                tasks: Sequence[TaskDataset],
                schedule: TrainSchedule,
                log: Optional[TrainingLog] = None,
                balance: Optional[str] = None,
                method: str = "joint") -> ModelDecomposition:
  """
  Minimize the sum of per-task classification losses over all tasks.

  round_robin: each step takes one batch from every task and sums the per-task losses; an
  epoch has as many steps as the largest task has batches. pooled: one shuffled loader over
  the union, so tasks weigh in proportion to their size.

  Raises:
      ConfigurationError: No tasks, an empty task, or a task without a head
  """
  balance = balance or schedule.joint_balance
  if not tasks:
    raise ConfigurationError("Joint training needs data for at least one task")
  for task in tasks:
    if len(task.train) == 0:
      raise ConfigurationError(f"Task {task.task_id} has no training data")
    model.check_head(task.task_id)

  for parameter in model.parameters():
    parameter.requires_grad_(True)
  optimizer = _optimizer(model.parameters(), schedule)
  datasets = {t.task_id: t.dataset(TRAIN, augment_images=schedule.augment, seed=schedule.seed,
                                   eval_crop=schedule.eval_crop) for t in tasks}
  val_sets = {t.task_id: _val_dataset(t, schedule) for t in tasks}

  def step(loss: torch.Tensor, epoch: int, index: int) -> Dict[str, float]:
    breakdown = LossBreakdown(total=loss, cls=float(loss.detach()))
    _check_finite(breakdown, -1, epoch, index)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return breakdown.components()

  def train_epoch_round_robin(epoch: int) -> Dict[str, float]:
    for dataset in datasets.values():
      dataset.set_epoch(epoch)
    model.train()
    n_steps = max(math.ceil(len(d) / schedule.batch_size) for d in datasets.values())
    streams = {task_id: _batches(d, schedule, task_id, epoch) for task_id, d in datasets.items()}
    rows = []
    for index in range(n_steps):
      losses = []
      for task_id, stream in streams.items():
        images, labels, _ = next(stream)
        losses.append(classification_loss(model, images, labels, task_id))
      rows.append(step(torch.stack(losses).sum(), epoch, index))
    return _mean_components(rows)

  pooled = torch.utils.data.ConcatDataset([_TaggedDataset(d, task_id) for task_id, d in datasets.items()])

  def train_epoch_pooled(epoch: int) -> Dict[str, float]:
    for dataset in datasets.values():
      dataset.set_epoch(epoch)
    model.train()
    rows = []
    for index, (images, labels, _, task_ids) in enumerate(make_loader(pooled, schedule.batch_size, schedule.seed,
                                                                      "joint_pooled", epoch)):
      total = None
      for task_id in sorted(set(task_ids.tolist())):
        mask = task_ids == task_id
        part = classification_loss(model, images[mask], labels[mask], task_id) * (mask.sum() / len(labels))
        total = part if total is None else total + part
      rows.append(step(total, epoch, index))
    return _mean_components(rows)

  def validate() -> float:
    accuracies = [evaluate(model, val_sets[t.task_id], t.task_id) for t in tasks]
    return sum(accuracies) / len(accuracies)

  def record(**fields) -> None:
    if log is not None:
      log.append(task=tasks[-1].task_id, method=method, phase="joint", **fields)

  train_epoch = train_epoch_round_robin if balance == ROUND_ROBIN else train_epoch_pooled
  _run_schedule(schedule, optimizer, train_epoch, validate, record)
  model.eval()
  logger.info("Joint training over %d tasks finished (%s)", len(tasks), balance)
  return model
