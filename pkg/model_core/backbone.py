"""
Decomposed backbone for incremental-task classification.

The network is split into three parts that every training strategy works against:

- feature_extractor (F): stack of conv blocks, image -> conv activation A (C x H x W)
- shared_classifier (C): flatten + fully connected blocks, A -> semantic feature h
- task_heads (C_t): one linear layer per task, h -> logits for that task's classes

Key Features:
- Layer stack described by a plain list of layer specs (see build_backbone)
- Named capture points for the attention taps (conv blocks) and the semantic tap (fc block)
- Deterministic initialization from the run seed, new heads drawn from their own stream
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from common.errors import ConfigurationError, UnknownHeadError, ValidationError
from common.seeding import derive_seed, make_generator

logger = logging.getLogger(__name__)

CONV = "conv"
FC = "fc"

DEFAULT_ARCH: List[Dict[str, Any]] = [
    {"type": CONV, "out_channels": 16, "kernel_size": 3, "pool": 2},
    {"type": CONV, "out_channels": 32, "kernel_size": 3, "pool": 2},
    {"type": CONV, "out_channels": 64, "kernel_size": 3, "pool": None},
    {"type": FC, "units": 128, "dropout": 0.5},
    {"type": FC, "units": 128, "dropout": 0.5},
]

# Xavier-uniform gain for freshly added heads
DEFAULT_HEAD_SCALE = 0.25


@dataclass
class InitSpec:
  """How a new task head is initialized."""
  scale: float = DEFAULT_HEAD_SCALE
  seed: Optional[int] = None

  def __post_init__(self):
    if self.scale <= 0:
      raise ValidationError("Head init scale must be positive")


@dataclass(frozen=True)
class CapturePoints:
  """Names of the layers whose activations are recorded. attention_layers is in network order."""
  attention_layers: Tuple[str, ...]
  semantic_layer: str

  @property
  def primary_attention(self) -> str:
    """The deepest attention tap."""
    return self.attention_layers[-1]


@dataclass
class ActivationBundle:
  """
  Activations recorded from one forward pass over one batch.

  conv_activation is the activation at the primary (deepest) attention tap, named by
  primary_tap. attention_map / attention_taps hold the normalized, flattened maps once
  attention_align.with_attention has filled them.
  """
  conv_activation: Tensor
  semantic_feature: Tensor
  logits_per_head: Dict[int, Tensor]
  conv_taps: Dict[str, Tensor] = field(default_factory=dict)
  primary_tap: Optional[str] = None
  attention_map: Optional[Tensor] = None
  attention_taps: Dict[str, Tensor] = field(default_factory=dict)


def _validate_arch(arch_config: Sequence[Dict[str, Any]]) -> None:
  if not arch_config:
    raise ConfigurationError("arch_config must not be empty")

  kinds = []
  for index, spec in enumerate(arch_config):
    kind = spec.get("type")
    if kind not in (CONV, FC):
      raise ConfigurationError(f"Layer {index}: unknown layer type {kind!r} (expected 'conv' or 'fc')")
    if kind == CONV and int(spec.get("out_channels", 0)) <= 0:
      raise ConfigurationError(f"Layer {index}: conv layer needs positive out_channels")
    if kind == FC and int(spec.get("units", 0)) <= 0:
      raise ConfigurationError(f"Layer {index}: fc layer needs positive units")
    kinds.append(kind)

  if CONV not in kinds or FC not in kinds:
    raise ConfigurationError("arch_config needs at least one conv layer and one fc layer")
  if kinds.index(FC) < len(kinds) - kinds[::-1].index(CONV):
    raise ConfigurationError("All conv layers must come before the fc layers")


class ModelDecomposition(nn.Module):
  """
  Backbone split into F, C and per-task heads C_t.

  Use build_backbone() rather than constructing this class directly so heads are
  created with the deterministic head initialization.
  """

  def __init__(self,
               arch_config: Sequence[Dict[str, Any]],
               in_channels: int = 3,
               image_size: int = 32,
               seed: int = 0,
               attention_layers: Optional[Sequence[str]] = None,
               semantic_layer: Optional[str] = None):
    super().__init__()
    _validate_arch(arch_config)
    if in_channels <= 0 or image_size <= 0:
      raise ConfigurationError("in_channels and image_size must be positive")

    self.arch_config = [dict(spec) for spec in arch_config]
    self.in_channels = int(in_channels)
    self.image_size = int(image_size)
    self.seed = int(seed)

    conv_blocks: "OrderedDict[str, nn.Module]" = OrderedDict()
    conv_output_shapes: Dict[str, Tuple[int, int, int]] = {}
    fc_blocks: "OrderedDict[str, nn.Module]" = OrderedDict()
    channels, size = self.in_channels, self.image_size
    features = 0

    for spec in self.arch_config:
      if spec["type"] == CONV:
        kernel = int(spec.get("kernel_size", 3))
        layers: List[nn.Module] = [
            nn.Conv2d(channels, int(spec["out_channels"]), kernel_size=kernel, padding=kernel // 2),
            nn.ReLU(),
        ]
        channels = int(spec["out_channels"])
        size = size + 2 * (kernel // 2) - kernel + 1
        pool = spec.get("pool")
        if pool:
          layers.append(nn.MaxPool2d(int(pool)))
          size = size // int(pool)
        if size <= 0:
          raise ConfigurationError(f"Image size {image_size} is too small for the conv stack")
        name = f"conv{len(conv_blocks) + 1}"
        conv_blocks[name] = nn.Sequential(*layers)
        conv_output_shapes[name] = (channels, size, size)
      else:
        if not features:
          features = channels * size * size
        dropout = float(spec.get("dropout", 0.0))
        layers = [nn.Dropout(dropout)] if dropout > 0 else []
        layers += [nn.Linear(features, int(spec["units"])), nn.ReLU()]
        features = int(spec["units"])
        fc_blocks[f"fc{len(fc_blocks) + 1}"] = nn.Sequential(*layers)

    self.conv_shape = (channels, size, size)
    self.conv_output_shapes = conv_output_shapes
    self.feature_dim = features
    self.feature_extractor = nn.Sequential(conv_blocks)
    self.flatten = nn.Flatten()
    self.shared_classifier = nn.Sequential(fc_blocks)
    self.task_heads = nn.ModuleList()

    requested = tuple(attention_layers or (list(conv_blocks)[-1],))
    semantic_layer = semantic_layer or list(fc_blocks)[-1]
    for name in requested:
      if name not in conv_blocks:
        raise ConfigurationError(f"Unknown attention capture layer {name!r}; conv layers: {list(conv_blocks)}")
    # network order, deepest tap last
    attention_layers = tuple(name for name in conv_blocks if name in requested)
    if semantic_layer not in fc_blocks:
      raise ConfigurationError(f"Unknown semantic capture layer {semantic_layer!r}; fc layers: {list(fc_blocks)}")
    self.capture_points = CapturePoints(attention_layers=attention_layers, semantic_layer=semantic_layer)

  def attention_tap_sizes(self) -> Dict[str, int]:
    """Flattened attention-map size H*W of every attention tap."""
    return {name: self.conv_output_shapes[name][1] * self.conv_output_shapes[name][2]
            for name in self.capture_points.attention_layers}

  @property
  def head_class_counts(self) -> List[int]:
    """Class count of every registered head, in task order."""
    return [head.out_features for head in self.task_heads]

  @property
  def num_heads(self) -> int:
    return len(self.task_heads)

  def check_head(self, head: int) -> None:
    """Raise UnknownHeadError unless `head` names an existing task head."""
    if not isinstance(head, int) or head < 0 or head >= len(self.task_heads):
      raise UnknownHeadError(f"Unknown head id {head!r} (model has {len(self.task_heads)} heads)")

  def check_input(self, batch: Tensor) -> None:
    """Raise ValidationError if the batch does not match the configured input geometry."""
    expected = (self.in_channels, self.image_size, self.image_size)
    if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
      raise ValidationError(f"Expected batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                            f"got {tuple(batch.shape)}")

  def shared_parameters(self) -> List[nn.Parameter]:
    """Parameters of F and C (everything except the task heads)."""
    return list(self.feature_extractor.parameters()) + list(self.shared_classifier.parameters())

  def forward(self, x: Tensor, head: int = 0) -> Tensor:
    self.check_head(head)
    return self.task_heads[head](self.shared_classifier(self.flatten(self.feature_extractor(x))))


def build_backbone(arch_config: Optional[Sequence[Dict[str, Any]]],
                   task_class_counts: Sequence[int],
                   in_channels: int = 3,
                   image_size: int = 32,
                   seed: int = 0,
                   attention_layers: Optional[Sequence[str]] = None,
                   semantic_layer: Optional[str] = None) -> ModelDecomposition:
  """
  Build a decomposed backbone with one head per entry of task_class_counts.

  Args:
      arch_config: Layer spec list, conv layers first. Conv spec keys: out_channels,
                   kernel_size (default 3), pool (optional). Fc spec keys: units, dropout.
                   None selects DEFAULT_ARCH.
      task_class_counts: Class count per initial task, must be non-empty and positive
      in_channels: Image channel count
      image_size: Square image side length
      seed: Run seed; F and C are initialized from a stream derived from it
      attention_layers: Conv layer names used as attention taps (default: last conv)
      semantic_layer: Fc layer name used as the semantic tap (default: last fc)

  Returns:
      ModelDecomposition: The built model

  Raises:
      ConfigurationError: Empty or malformed arch_config
      ValidationError: Empty or non-positive class counts
  """
  if arch_config is None:
    arch_config = DEFAULT_ARCH
  if not arch_config:
    raise ConfigurationError("arch_config must not be empty")
  counts = list(task_class_counts)
  if not counts:
    raise ValidationError("task_class_counts must name at least one task")
  for count in counts:
    if int(count) != count or count < 1:
      raise ValidationError(f"Class counts must be positive integers, got {count!r}")

  with torch.random.fork_rng(devices=[]):
    torch.manual_seed(derive_seed(seed, "backbone"))
    model = ModelDecomposition(arch_config, in_channels, image_size, seed, attention_layers, semantic_layer)

  for count in counts:
    add_head(model, int(count))

  logger.info("Built backbone: conv output %s, feature dim %d, heads %s",
              model.conv_shape, model.feature_dim, model.head_class_counts)
  return model


def add_head(model: ModelDecomposition, class_count: int, init: Optional[InitSpec] = None) -> int:
  """
  Append a task head and return its id.

  The weights are Xavier-uniform scaled by init.scale, bias zero, drawn from a generator
  derived from (seed, head index) so they do not depend on how much randomness was used
  before. F, C and the existing heads are not touched.

  Raises:
      ValidationError: class_count < 1
  """
  if not isinstance(class_count, int) or class_count < 1:
    raise ValidationError(f"class_count must be a positive integer, got {class_count!r}")
  init = init or InitSpec()
  head_id = len(model.task_heads)
  seed = model.seed if init.seed is None else init.seed

  reference = next(model.shared_classifier.parameters())
  head = nn.Linear(model.feature_dim, class_count).to(dtype=reference.dtype, device=reference.device)
  with torch.no_grad():
    nn.init.xavier_uniform_(head.weight, gain=init.scale, generator=make_generator(seed, "head", head_id))
    nn.init.zeros_(head.bias)
  model.task_heads.append(head)

  logger.info("Added head %d with %d classes", head_id, class_count)
  return head_id


def forward_capture(model: ModelDecomposition, batch: Tensor, heads: Iterable[int]) -> ActivationBundle:
  """
  Run one forward pass and record the capture-point activations.

  Args:
      model: The model (its current train/eval mode is used as is)
      batch: Image batch (N, C, H, W)
      heads: Task ids whose logits are wanted

  Returns:
      ActivationBundle: conv activation, semantic feature and per-head logits; attention maps unset

  Raises:
      UnknownHeadError: A requested head does not exist
      ValidationError: Batch geometry does not match the model
  """
  head_ids = list(dict.fromkeys(heads))
  for head in head_ids:
    model.check_head(head)
  model.check_input(batch)

  taps: Dict[str, Tensor] = {}
  out = batch
  for name, block in model.feature_extractor.named_children():
    out = block(out)
    if name in model.capture_points.attention_layers:
      taps[name] = out

  semantic = None
  out = model.flatten(out)
  for name, block in model.shared_classifier.named_children():
    out = block(out)
    if name == model.capture_points.semantic_layer:
      semantic = out

  logits = {head: model.task_heads[head](out) for head in head_ids}
  primary = model.capture_points.primary_attention
  return ActivationBundle(
      conv_activation=taps[primary],
      semantic_feature=semantic,
      logits_per_head=logits,
      conv_taps=taps,
      primary_tap=primary
  )
