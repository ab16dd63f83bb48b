"""
Frozen model snapshots and checkpoint archives.

A FrozenSnapshot is a full parameter copy of the model taken before a new task updates
the shared layers. It only ever evaluates in inference mode and never yields gradients,
so its outputs are usable as fixed soft targets for the rest of the task.
"""

import copy
import hashlib
import logging
import os
import pickle
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import torch
from torch import Tensor, nn

from common.errors import CheckpointError
from .backbone import ActivationBundle, ModelDecomposition, forward_capture

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def parameter_digest(module: nn.Module, prefix: str = "") -> str:
  """
  SHA-256 over every named parameter and buffer whose name starts with prefix.

  Used to audit that frozen parts of a model are bitwise unchanged.
  """
  digest = hashlib.sha256()
  for name, tensor in sorted(module.state_dict().items()):
    if not name.startswith(prefix):
      continue
    digest.update(name.encode("utf-8"))
    digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
  return digest.hexdigest()


class FrozenSnapshot:
  """
  Immutable copy of a ModelDecomposition.

  The wrapped model is kept in eval mode with requires_grad disabled; forward passes run
  under torch.no_grad(). Safe for concurrent read-only evaluation.
  """

  def __init__(self, model: ModelDecomposition):
    self._model = copy.deepcopy(model)
    self._model.eval()
    for parameter in self._model.parameters():
      parameter.requires_grad_(False)
    self._digest = parameter_digest(self._model)

  @property
  def frozen(self) -> bool:
    return True

  @property
  def model(self) -> ModelDecomposition:
    """The frozen model. Treat as read-only."""
    return self._model

  @property
  def num_heads(self) -> int:
    return self._model.num_heads

  @property
  def head_ids(self) -> Tuple[int, ...]:
    return tuple(range(self._model.num_heads))

  def forward_capture(self, batch: Tensor, heads: Optional[Iterable[int]] = None) -> ActivationBundle:
    """Inference-mode forward over the snapshot; all heads when heads is None."""
    if self._model.training:
      self._model.eval()
    with torch.no_grad():
      return forward_capture(self._model, batch, self.head_ids if heads is None else heads)

  def forward(self, batch: Tensor, head: int = 0) -> Tensor:
    return self.forward_capture(batch, [head]).logits_per_head[head]

  def digest(self) -> str:
    """Current parameter digest; equals the digest taken at snapshot time unless something broke the freeze."""
    return parameter_digest(self._model)

  def verify(self) -> bool:
    """True when the parameters are bitwise identical to the moment of the snapshot."""
    return self.digest() == self._digest


def snapshot(model: ModelDecomposition) -> FrozenSnapshot:
  """Take a deep, independent, frozen copy of the model."""
  frozen = FrozenSnapshot(model)
  logger.debug("Snapshot taken with %d heads (digest %s)", frozen.num_heads, frozen.digest()[:12])
  return frozen


def save_checkpoint(model: ModelDecomposition,
                    path: Union[str, Path],
                    extra: Optional[Dict[str, Any]] = None) -> Path:
  """
  Write a self-describing checkpoint archive.

  Args:
      model: Model to persist
      path: Destination file
      extra: Optional payload stored alongside (discriminator weights, task ids, data descriptor)

  Returns:
      Path: The written file
  """
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  archive = {
      "format_version": CHECKPOINT_FORMAT_VERSION,
      "arch_config": model.arch_config,
      "in_channels": model.in_channels,
      "image_size": model.image_size,
      "attention_layers": list(model.capture_points.attention_layers),
      "semantic_layer": model.capture_points.semantic_layer,
      "head_class_counts": model.head_class_counts,
      "seed": model.seed,
      "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
      "state_dict": {name: tensor.detach().cpu().clone() for name, tensor in model.state_dict().items()},
      "extra": extra or {},
  }
  # atomic replace
  partial = path.with_name(path.name + ".partial")
  torch.save(archive, partial)
  os.replace(partial, path)
  logger.debug("Saved checkpoint to %s", path)
  return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelDecomposition, Dict[str, Any]]:
  """
  Rebuild a model from a checkpoint archive.

  Returns:
      Tuple[ModelDecomposition, Dict[str, Any]]: The model (eval mode) and the extra payload

  Raises:
      CheckpointError: Missing, unreadable or inconsistent archive
  """
  path = Path(path)
  if not path.is_file():
    raise CheckpointError(f"Checkpoint not found: {path}")
  try:
    archive = torch.load(path, map_location="cpu", weights_only=False)
  except (OSError, RuntimeError, EOFError, ValueError, AttributeError, pickle.UnpicklingError) as e:
    logger.error("Failed to read checkpoint %s: %s", path, str(e))
    raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e

  if not isinstance(archive, dict) or archive.get("format_version") != CHECKPOINT_FORMAT_VERSION:
    raise CheckpointError(f"Unsupported or corrupt checkpoint format in {path}")

  try:
    with torch.random.fork_rng(devices=[]):
      model = ModelDecomposition(
          archive["arch_config"],
          archive["in_channels"],
          archive["image_size"],
          archive["seed"],
          archive["attention_layers"],
          archive["semantic_layer"]
      ).to(dtype=getattr(torch, archive["dtype"]))
      for count in archive["head_class_counts"]:
        model.task_heads.append(nn.Linear(model.feature_dim, count).to(dtype=getattr(torch, archive["dtype"])))
    model.load_state_dict(archive["state_dict"])
  except (KeyError, RuntimeError, TypeError, ValueError, AttributeError) as e:
    logger.error("Inconsistent checkpoint %s: %s", path, str(e))
    raise CheckpointError(f"Inconsistent checkpoint {path}: {e}") from e

  model.eval()
  logger.info("Loaded checkpoint %s (%d heads)", path, model.num_heads)
  return model, archive.get("extra", {})


def save_snapshot(frozen: FrozenSnapshot, path: Union[str, Path]) -> Path:
  """Persist a snapshot; it reloads as an equal FrozenSnapshot."""
  return save_checkpoint(frozen.model, path, extra={"frozen": True})


def load_snapshot(path: Union[str, Path]) -> FrozenSnapshot:
  model, _ = load_checkpoint(path)
  return FrozenSnapshot(model)
