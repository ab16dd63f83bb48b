"""
Sequential-task experiment driver.

Every method starts from the same model: the backbone trained on task 0 with the plain
classification loss. Sequential methods then iterate the remaining tasks (snapshot, add
head, warm up, train) and evaluate every seen task after each stage. The warm-up of the
first new head does not depend on the method, so it is computed once and shared.

The joint baseline warms up every new head from the shared model, trains on all tasks
together, and fills every row of its accuracy matrix from that final model.
"""

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from common.errors import ConfigurationError
from common.seeding import seed_everything
from data_tasks.tasks import TEST, TaskSequence
from metrics_report.metrics import SequenceResult, evaluate
from model_core.backbone import ModelDecomposition, add_head, build_backbone
from model_core.snapshot import snapshot
from .methods import MethodName, MethodSpec
from .trainer import TrainingLog, TrainSchedule, joint_train, make_discriminator_bank, train_task, warm_up

logger = logging.getLogger(__name__)

FIRST_TASK = MethodSpec(name=MethodName.FINETUNE, label="first_task")


@dataclass
class SharedStart:
  """State shared by all methods of one sequence run."""
  base_model: ModelDecomposition
  warmed_model: ModelDecomposition
  base_accuracy: float
  log: TrainingLog = field(default_factory=TrainingLog)
  elapsed_seconds: float = 0.0


@dataclass
class MethodOutcome:
  """Result, final model, training log and last discriminator state of one method."""
  result: SequenceResult
  model: ModelDecomposition
  log: TrainingLog
  discriminator_state: Optional[Dict[str, Any]] = None


def evaluate_seen(model: ModelDecomposition, sequence: TaskSequence, upto: int, schedule: TrainSchedule) -> List[float]:
  """Test accuracy on tasks 0..upto with the current model."""
  return [evaluate(model, sequence[j].dataset(TEST, eval_crop=schedule.eval_crop), sequence[j].task_id)
          for j in range(upto + 1)]


def prepare_start(sequence: TaskSequence,
                  schedule: TrainSchedule,
                  arch_config: Optional[Sequence[Dict[str, Any]]] = None,
                  attention_layers: Optional[Sequence[str]] = None,
                  semantic_layer: Optional[str] = None) -> SharedStart:
  """
  Train the backbone on task 0 and warm up the head of task 1.

  Raises:
      ConfigurationError: Fewer than two tasks
  """
  if len(sequence) < 2:
    raise ConfigurationError(f"A task sequence needs at least 2 tasks, got {len(sequence)}")
  started = time.perf_counter()
  seed_everything(schedule.seed)
  first = sequence[0]
  image = first.train.images
  model = build_backbone(arch_config, [first.class_count], in_channels=image.shape[1], image_size=image.shape[-1],
                         seed=schedule.seed, attention_layers=attention_layers, semantic_layer=semantic_layer)
  log = TrainingLog()
  logger.info("Training the shared start model on task %d", first.task_id)
  train_task(model, None, FIRST_TASK, first, schedule, log=log, phase="first_task")
  base_accuracy = evaluate_seen(model, sequence, 0, schedule)[0]

  warmed = copy.deepcopy(model)
  head = add_head(warmed, sequence[1].class_count)
  warm_up(warmed, sequence[1], head, schedule, log=log)
  return SharedStart(base_model=model, warmed_model=warmed, base_accuracy=base_accuracy, log=log,
                     elapsed_seconds=time.perf_counter() - started)


def run_method(start: SharedStart,
               sequence: TaskSequence,
               method: MethodSpec,
               schedule: TrainSchedule,
               config_digest: str = "",
               state_dir: Optional[Union[str, Path]] = None) -> MethodOutcome:
  """
  Run one method over the whole sequence from the shared start.

  Global generators are reseeded with the run seed first, so the outcome does not depend
  on which methods ran before or in which process.

  With state_dir, every sequential task keeps a resumable checkpoint there
  (task<t>_state.pt). Running again with the same directory restores finished tasks and
  continues an interrupted one, giving the same outcome as an uninterrupted run.
  """
  started = time.perf_counter()
  seed_everything(schedule.seed)
  log = TrainingLog()
  n_tasks = len(sequence)
  bank = None

  if method.is_joint:
    model = copy.deepcopy(start.warmed_model)
    for t in range(2, n_tasks):
      head = add_head(model, sequence[t].class_count)
      warm_up(model, sequence[t], head, schedule, log=log, method=method.label)
    joint_train(model, list(sequence), schedule, log=log, method=method.label)
    final = evaluate_seen(model, sequence, n_tasks - 1, schedule)
    matrix = [final[:i + 1] for i in range(n_tasks)]
  else:
    model = copy.deepcopy(start.base_model)
    matrix = [[start.base_accuracy]]
    for t in range(1, n_tasks):
      frozen = snapshot(model)
      if t == 1:
        model = copy.deepcopy(start.warmed_model)
      else:
        head = add_head(model, sequence[t].class_count)
        warm_up(model, sequence[t], head, schedule, log=log, method=method.label)
      bank = None
      if method.weights.uses_adversarial:
        bank = make_discriminator_bank(model, schedule, sequence[t].task_id)
      state_path = Path(state_dir) / f"task{t}_state.pt" if state_dir is not None else None
      train_task(model, frozen, method, sequence[t], schedule, log=log, bank=bank, state_path=state_path)
      matrix.append(evaluate_seen(model, sequence, t, schedule))
      logger.info("%s after task %d: %s", method.label, t, ["%.4f" % a for a in matrix[-1]])

  elapsed = time.perf_counter() - started
  result = SequenceResult(
      method=method.label,
      seed=schedule.seed,
      config_digest=config_digest,
      tasks=[{"id": task.task_id, "classes": task.class_count} for task in sequence],
      accuracy_matrix=matrix,
      timing={"method_seconds": elapsed, "shared_start_seconds": start.elapsed_seconds}
  )
  return MethodOutcome(result=result, model=model, log=log,
                        discriminator_state=bank.state_dict() if bank is not None else None)


def run_sequence(sequence: TaskSequence,
                 methods: Sequence[MethodSpec],
                 schedule: TrainSchedule,
                 arch_config: Optional[Sequence[Dict[str, Any]]] = None,
                 config_digest: str = "",
                 attention_layers: Optional[Sequence[str]] = None,
                 semantic_layer: Optional[str] = None) -> Dict[str, MethodOutcome]:
  """
  Run every method over the sequence, in order, in this process.

  Returns:
      Dict[str, MethodOutcome]: Outcomes keyed by method label

  Raises:
      ConfigurationError: Fewer than two tasks, no methods or duplicate labels
  """
  if not methods:
    raise ConfigurationError("No methods to run")
  labels = [m.label for m in methods]
  if len(set(labels)) != len(labels):
    raise ConfigurationError(f"Duplicate method labels: {labels}")
  start = prepare_start(sequence, schedule, arch_config, attention_layers, semantic_layer)
  return {method.label: run_method(start, sequence, method, schedule, config_digest) for method in methods}
