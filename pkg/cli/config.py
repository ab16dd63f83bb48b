"""
Experiment configuration.

A YAML document is loaded into ExperimentConfig and fully validated before any compute
starts. Unknown keys are rejected and every message names the line of the offending key;
positions come from the composed node tree, values from safe_load.

Example:
    name: two_task_synthetic
    seed: 0
    n_tasks: 2
    out_dir: runs
    data:
      source: {type: synthetic_mixed, num_classes: 10, samples_per_class: 200}
    methods: [finetune, lwf, afa, joint]
    weights: {lambda1: 1.0}
    schedule: {warmup_epochs: 5, max_epochs: 30, post_plateau_epochs: 5}
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml

from common.errors import ConfigurationError
from continual_engine.methods import MethodSpec, make_method
from continual_engine.trainer import TrainSchedule

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ("name", "seed", "n_tasks", "out_dir", "data", "model", "methods", "weights", "schedule",
                  "epochs_scale", "parallel_methods", "render_plots")
DATA_KEYS = ("source", "val_fraction", "test_fraction", "manifest")
SOURCE_KEYS = ("type", "root", "num_classes", "samples_per_class", "image_size", "channels", "noise", "seed",
               "max_per_class")
MODEL_KEYS = ("arch", "attention_layers", "semantic_layer")
WEIGHT_KEYS = ("lambda1", "lambda2", "lambda3")
# the run seed is set at the top level only
SCHEDULE_KEYS = tuple(f.name for f in fields(TrainSchedule) if f.name != "seed")

KeyPath = Tuple[Any, ...]


@dataclass
class DataConfig:
  """Image source descriptor plus the sequence split options."""
  source: Dict[str, Any] = field(default_factory=dict)
  val_fraction: float = 0.1
  test_fraction: float = 0.2
  manifest: Optional[Union[str, Dict[str, Any]]] = None

  def to_dict(self) -> Dict[str, Any]:
    return asdict(self)


@dataclass
class ModelConfig:
  arch: Optional[List[Dict[str, Any]]] = None
  attention_layers: Optional[List[str]] = None
  semantic_layer: Optional[str] = None

  def to_dict(self) -> Dict[str, Any]:
    return asdict(self)


@dataclass
class ExperimentConfig:
  """
  A validated experiment.

  weights holds lambda overrides; None keeps the method defaults. schedule carries the
  unscaled epoch counts, epochs_scale is applied by run_schedule().
  """
  name: str = "experiment"
  seed: int = 0
  n_tasks: int = 2
  out_dir: str = "runs"
  data: DataConfig = field(default_factory=DataConfig)
  model: ModelConfig = field(default_factory=ModelConfig)
  methods: List[str] = field(default_factory=lambda: ["finetune", "lwf", "afa", "joint"])
  weights: Dict[str, Optional[float]] = field(default_factory=dict)
  schedule: TrainSchedule = field(default_factory=TrainSchedule)
  epochs_scale: float = 1.0
  parallel_methods: int = 1
  render_plots: bool = True

  def run_schedule(self) -> TrainSchedule:
    schedule = replace(self.schedule, seed=self.seed)
    return schedule if self.epochs_scale == 1.0 else schedule.scaled(self.epochs_scale)

  def method_specs(self) -> List[MethodSpec]:
    return [make_method(label, self.n_tasks, self.weights) for label in self.methods]

  def resolved(self) -> Dict[str, Any]:
    """
    Every setting that affects results, with defaults filled in.

    out_dir, parallel_methods and render_plots are left out: they change where and how a
    run executes, not what it computes.
    """
    return {
        "name": self.name,
        "seed": self.seed,
        "n_tasks": self.n_tasks,
        "data": self.data.to_dict(),
        "model": self.model.to_dict(),
        "methods": [spec.to_dict() for spec in self.method_specs()],
        "schedule": self.run_schedule().to_dict(),
        "epochs_scale": self.epochs_scale,
    }

  def digest(self) -> str:
    """SHA-256 of the canonical JSON form of resolved()."""
    return hashlib.sha256(canonical_json(self.resolved()).encode("utf-8")).hexdigest()


def canonical_json(data: Any) -> str:
  return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _key_lines(node: yaml.Node, path: KeyPath = (), lines: Optional[Dict[KeyPath, int]] = None) -> Dict[KeyPath, int]:
  """Map each key path (and sequence item path) to its 1-based line."""
  if lines is None:
    lines = {path: node.start_mark.line + 1}
  if isinstance(node, yaml.MappingNode):
    for key_node, value_node in node.value:
      key_path = path + (key_node.value,)
      lines[key_path] = key_node.start_mark.line + 1
      _key_lines(value_node, key_path, lines)
  elif isinstance(node, yaml.SequenceNode):
    for index, item in enumerate(node.value):
      item_path = path + (index,)
      lines[item_path] = item.start_mark.line + 1
      _key_lines(item, item_path, lines)
  return lines


class _Checker:
  """Type and range checks that report the line of the offending key."""

  def __init__(self, lines: Dict[KeyPath, int]):
    self.lines = lines

  def fail(self, path: KeyPath, message: str) -> ConfigurationError:
    dotted = ".".join(str(p) for p in path)
    return ConfigurationError(f"{dotted}: {message}" if dotted else message, line=self.lines.get(path))

  def mapping(self, value: Any, path: KeyPath, allowed: Sequence[str]) -> Dict[str, Any]:
    if value is None:
      return {}
    if not isinstance(value, dict):
      raise self.fail(path, "expected a mapping")
    for key in value:
      if key not in allowed:
        raise self.fail(path + (key,), f"unknown key (allowed: {', '.join(allowed)})")
    return value

  def integer(self, value: Any, path: KeyPath, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
      raise self.fail(path, f"expected an integer, got {value!r}")
    if value < minimum:
      raise self.fail(path, f"must be at least {minimum}, got {value}")
    return value

  def number(self, value: Any, path: KeyPath, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
      raise self.fail(path, f"expected a finite number, got {value!r}")
    if value < 0 or (positive and value == 0):
      raise self.fail(path, f"must be {'positive' if positive else 'non-negative'}, got {value}")
    return float(value)

  def boolean(self, value: Any, path: KeyPath) -> bool:
    if not isinstance(value, bool):
      raise self.fail(path, f"expected true or false, got {value!r}")
    return value

  def string(self, value: Any, path: KeyPath) -> str:
    if not isinstance(value, str) or not value.strip():
      raise self.fail(path, f"expected a non-empty string, got {value!r}")
    return value.strip()


def _schedule(checker: _Checker, raw: Dict[str, Any]) -> TrainSchedule:
  defaults = TrainSchedule()
  values: Dict[str, Any] = {}
  for key, value in raw.items():
    path = ("schedule", key)
    default = getattr(defaults, key)
    if isinstance(default, bool):
      values[key] = checker.boolean(value, path)
    elif isinstance(default, int):
      values[key] = checker.integer(value, path, 0)
    elif isinstance(default, float) or default is None:
      values[key] = None if value is None and default is None else checker.number(value, path)
    else:
      values[key] = checker.string(value, path)
  try:
    return TrainSchedule(**values)
  except ConfigurationError as e:
    culprit = next((k for k in raw if k in str(e)), None)
    raise checker.fail(("schedule", culprit) if culprit else ("schedule",), str(e)) from e


def _data(checker: _Checker, raw: Dict[str, Any]) -> DataConfig:
  source = dict(checker.mapping(raw.get("source"), ("data", "source"), SOURCE_KEYS))
  if "type" in source:
    source["type"] = checker.string(source["type"], ("data", "source", "type"))
  val_fraction = checker.number(raw.get("val_fraction", 0.1), ("data", "val_fraction"), positive=True)
  test_fraction = checker.number(raw.get("test_fraction", 0.2), ("data", "test_fraction"), positive=True)
  if val_fraction + test_fraction >= 1:
    raise checker.fail(("data",), "val_fraction + test_fraction must be below 1")
  manifest = raw.get("manifest")
  if manifest is not None and not isinstance(manifest, (str, dict)):
    raise checker.fail(("data", "manifest"), "expected a file path or a {tasks: [[class names]]} mapping")
  return DataConfig(source=source, val_fraction=val_fraction, test_fraction=test_fraction, manifest=manifest)


def _model(checker: _Checker, raw: Dict[str, Any]) -> ModelConfig:
  arch = raw.get("arch")
  if arch is not None:
    if not isinstance(arch, list) or not arch:
      raise checker.fail(("model", "arch"), "expected a non-empty list of layer specs")
    for index, layer in enumerate(arch):
      if not isinstance(layer, dict) or layer.get("type") not in ("conv", "fc"):
        raise checker.fail(("model", "arch", index), "each layer needs type: conv or type: fc")
  layers = raw.get("attention_layers")
  if layers is not None and (not isinstance(layers, list) or not all(isinstance(n, str) for n in layers)):
    raise checker.fail(("model", "attention_layers"), "expected a list of conv layer names")
  semantic = raw.get("semantic_layer")
  if semantic is not None:
    semantic = checker.string(semantic, ("model", "semantic_layer"))
  return ModelConfig(arch=arch, attention_layers=layers, semantic_layer=semantic)


def _methods(checker: _Checker, raw: Any, n_tasks: int, weights: Dict[str, Optional[float]]) -> List[str]:
  if isinstance(raw, str):
    raw = [m for m in raw.split(",") if m.strip()]
  if not isinstance(raw, list) or not raw:
    raise checker.fail(("methods",), "expected a non-empty list of method labels")
  labels = []
  for index, label in enumerate(raw):
    label = checker.string(label, ("methods", index)).replace(" ", "")
    try:
      make_method(label, n_tasks, weights)
    except ConfigurationError as e:
      raise checker.fail(("methods", index), str(e)) from e
    if label in labels:
      raise checker.fail(("methods", index), f"duplicate method {label!r}")
    labels.append(label)
  return labels


def _build(raw: Any, lines: Dict[KeyPath, int]) -> ExperimentConfig:
  checker = _Checker(lines)
  raw = checker.mapping(raw, (), TOP_LEVEL_KEYS)

  weights_raw = checker.mapping(raw.get("weights"), ("weights",), WEIGHT_KEYS)
  weights = {key: None if value is None else checker.number(value, ("weights", key))
             for key, value in weights_raw.items()}
  n_tasks = checker.integer(raw.get("n_tasks", 2), ("n_tasks",), 2)

  config = ExperimentConfig(
      name=checker.string(raw.get("name", "experiment"), ("name",)),
      seed=checker.integer(raw.get("seed", 0), ("seed",), 0),
      n_tasks=n_tasks,
      out_dir=checker.string(raw.get("out_dir", "runs"), ("out_dir",)),
      data=_data(checker, checker.mapping(raw.get("data"), ("data",), DATA_KEYS)),
      model=_model(checker, checker.mapping(raw.get("model"), ("model",), MODEL_KEYS)),
      methods=_methods(checker, raw.get("methods", ["finetune", "lwf", "afa", "joint"]), n_tasks, weights),
      weights=weights,
      schedule=_schedule(checker, checker.mapping(raw.get("schedule"), ("schedule",), SCHEDULE_KEYS)),
      epochs_scale=checker.number(raw.get("epochs_scale", 1.0), ("epochs_scale",), positive=True),
      parallel_methods=checker.integer(raw.get("parallel_methods", 1), ("parallel_methods",), 1),
      render_plots=checker.boolean(raw.get("render_plots", True), ("render_plots",)),
  )
  return config


def parse_config(text: str) -> ExperimentConfig:
  """
  Parse and validate a YAML document.

  Raises:
      ConfigurationError: Malformed YAML, unknown keys or invalid values (with line numbers)
  """
  try:
    root = yaml.compose(text, Loader=yaml.SafeLoader)
    raw = yaml.safe_load(text)
  except yaml.YAMLError as e:
    mark = getattr(e, "problem_mark", None)
    raise ConfigurationError(f"Malformed YAML: {getattr(e, 'problem', None) or e}",
                             line=mark.line + 1 if mark else None) from e
  lines = _key_lines(root) if root is not None else {}
  return _build(raw, lines)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
  """
  Load an experiment config file.

  Raises:
      ConfigurationError: Missing file or invalid content
  """
  path = Path(path)
  if not path.is_file():
    raise ConfigurationError(f"Config file not found: {path}")
  try:
    text = path.read_text(encoding="utf-8")
  except OSError as e:
    raise ConfigurationError(f"Cannot read config {path}: {e}") from e
  config = parse_config(text)
  logger.info("Loaded config %s (%s, %d tasks, methods %s)", path, config.name, config.n_tasks, config.methods)
  return config


def apply_overrides(config: ExperimentConfig,
                    seed: Optional[int] = None,
                    out_dir: Optional[str] = None,
                    methods: Optional[str] = None,
                    lambda1: Optional[float] = None,
                    lambda2: Optional[float] = None,
                    lambda3: Optional[float] = None,
                    epochs_scale: Optional[float] = None,
                    parallel_methods: Optional[int] = None) -> ExperimentConfig:
  """
  Apply command-line overrides; they win over the file and end up in the digest.

  Raises:
      ConfigurationError: Invalid override values
  """
  checker = _Checker({})
  changes: Dict[str, Any] = {}
  if seed is not None:
    changes["seed"] = checker.integer(seed, ("--seed",), 0)
  if out_dir is not None:
    changes["out_dir"] = checker.string(out_dir, ("--out",))
  if epochs_scale is not None:
    changes["epochs_scale"] = checker.number(epochs_scale, ("--epochs-scale",), positive=True)
  if parallel_methods is not None:
    changes["parallel_methods"] = checker.integer(parallel_methods, ("--parallel-methods",), 1)

  weights = dict(config.weights)
  for key, value in (("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)):
    if value is not None:
      weights[key] = checker.number(value, (f"--{key}",))
  changes["weights"] = weights
  changes["methods"] = _methods(checker, methods if methods is not None else list(config.methods),
                                config.n_tasks, weights)
  logger.debug("Command-line overrides: %s", changes)
  return replace(config, **changes)
