"""
Accuracy evaluation and the forgetting / gain metrics.

Accuracies are stored as fractions in [0, 1]; derived metrics are in percentage points.
Task numbers passed to avg_forgetting and new_task_gain are 1-based, as in the result
tables; everything else uses 0-based task ids.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import torch
from torch.utils.data import DataLoader, Dataset

from common.errors import ValidationError
from model_core.backbone import ModelDecomposition

logger = logging.getLogger(__name__)


@dataclass
class SequenceResult:
  """
  Accuracy matrix of one method over one task sequence.

  accuracy_matrix[i][j] is the test accuracy on task j after training on task i (j <= i),
  so row i has i + 1 entries.
  """
  method: str
  seed: int
  config_digest: str
  tasks: List[Dict[str, Any]]
  accuracy_matrix: List[List[float]]
  timing: Dict[str, float] = field(default_factory=dict)

  def __post_init__(self):
    for i, row in enumerate(self.accuracy_matrix):
      if len(row) != i + 1:
        raise ValidationError(f"Row {i} of the accuracy matrix must have {i + 1} entries, got {len(row)}")
      for value in row:
        if not 0.0 <= value <= 1.0:
          raise ValidationError(f"Accuracy {value} outside [0, 1]")

  @property
  def n_tasks(self) -> int:
    return len(self.accuracy_matrix)

  def accuracy(self, stage: int, task: int) -> float:
    """Accuracy on 0-based task after 0-based stage."""
    if not 0 <= task <= stage < self.n_tasks:
      raise ValidationError(f"No accuracy for task {task} after stage {stage}")
    return self.accuracy_matrix[stage][task]

  def to_dict(self) -> Dict[str, Any]:
    return {
        "method": self.method,
        "seed": self.seed,
        "config_digest": self.config_digest,
        "tasks": [dict(t) for t in self.tasks],
        "accuracy_matrix": [list(row) for row in self.accuracy_matrix],
    }


def evaluate(model: ModelDecomposition, dataset: Dataset, head: int, batch_size: int = 256) -> float:
  """
  Fraction of samples whose argmax logit equals the label.

  Ties go to the lowest class index (torch.argmax returns the first maximum). The model is
  evaluated in inference mode and its previous train/eval mode is restored.

  Raises:
      ValidationError: Empty dataset
      UnknownHeadError: Head does not exist
  """
  if len(dataset) == 0:
    raise ValidationError("Cannot evaluate on an empty test set")
  model.check_head(head)
  was_training = model.training
  model.eval()
  correct = 0
  total = 0
  try:
    with torch.no_grad():
      for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        images, labels = batch[0], batch[1]
        predictions = model(images, head).argmax(dim=1)
        correct += int((predictions == labels).sum())
        total += int(labels.numel())
  finally:
    model.train(was_training)
  return correct / total


def drop_vs_reference(acc_method: float, acc_ref: float, percent: bool = False) -> float:
  """
  Signed difference acc_method - acc_ref in percentage points.

  Args:
      acc_method: Accuracy of the method
      acc_ref: Accuracy of the reference
      percent: Inputs are percentages in [0, 100] rather than fractions in [0, 1]

  Raises:
      ValidationError: An input outside the range of its unit
  """
  upper = 100.0 if percent else 1.0
  for value in (acc_method, acc_ref):
    if not 0.0 <= value <= upper:
      raise ValidationError(f"Accuracy {value} outside [0, {upper:g}]")
  scale = 1.0 if percent else 100.0
  return (acc_method - acc_ref) * scale


def avg_forgetting(result: SequenceResult, upto_task: int) -> float:
  """
  Mean over earlier tasks j of acc[upto][j] - acc[j][j], in percentage points.

  Args:
      result: Sequence result
      upto_task: 1-based task number, at least 2

  Raises:
      ValidationError: upto_task out of range
  """
  if not 2 <= upto_task <= result.n_tasks:
    raise ValidationError(f"upto_task must be in [2, {result.n_tasks}], got {upto_task}")
  stage = upto_task - 1
  drops = [result.accuracy_matrix[stage][j] - result.accuracy_matrix[j][j] for j in range(stage)]
  return 100.0 * sum(drops) / len(drops)


def new_task_gain(result_method: SequenceResult, result_finetune: SequenceResult, task: int) -> float:
  """
  acc_method[t][t] - acc_finetune[t][t] in percentage points, for 1-based task t.

  Raises:
      ValidationError: The results cover different sequences or do not reach task t
  """
  if [t.get("id") for t in result_method.tasks] != [t.get("id") for t in result_finetune.tasks]:
    raise ValidationError("Results come from different task sequences")
  if not 1 <= task <= min(result_method.n_tasks, result_finetune.n_tasks):
    raise ValidationError(f"Task {task} is not covered by both results")
  stage = task - 1
  return 100.0 * (result_method.accuracy_matrix[stage][stage] - result_finetune.accuracy_matrix[stage][stage])


def average_accuracy(result: SequenceResult, stage: Optional[int] = None) -> float:
  """Mean accuracy over the tasks seen at a 0-based stage (default: the last one)."""
  stage = result.n_tasks - 1 if stage is None else stage
  if not 0 <= stage < result.n_tasks:
    raise ValidationError(f"Stage {stage} out of range")
  row = result.accuracy_matrix[stage]
  return sum(row) / len(row)


def derived_metrics(result: SequenceResult, finetune: Optional[SequenceResult] = None) -> Dict[str, List[float]]:
  """avg_forgetting for tasks 2..n and new_task_gain for tasks 2..n (empty without a finetune result)."""
  forgetting = [avg_forgetting(result, t) for t in range(2, result.n_tasks + 1)]
  gain = []
  if finetune is not None:
    gain = [new_task_gain(result, finetune, t) for t in range(2, result.n_tasks + 1)]
  return {"avg_forgetting": forgetting, "new_task_gain": gain}
