"""
Command implementations: run, eval and plot.

Each command returns a process exit code instead of raising:
  0  success
  2  invalid configuration or missing inputs
  3  training diverged
  4  unreadable or corrupt checkpoint
"""

import json
import logging
import re
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from common.errors import CheckpointError, ConfigurationError, DivergenceError, UnknownHeadError, ValidationError
from continual_engine.run_queue import RunQueue
from continual_engine.sequence import prepare_start, run_method
from data_tasks.factory import ImageSourceFactory
from data_tasks.tasks import TEST, TaskSequence, build_sequence
from metrics_report.metrics import evaluate
from metrics_report.report import emit_report, validate_results_document, write_plot_data
from model_core.snapshot import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_overrides, load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4

CHECKPOINT_NAME = "checkpoint.pt"
TRAINING_LOG_NAME = "training.jsonl"


def _safe_name(label: str) -> str:
  return re.sub(r"[^A-Za-z0-9_.=+-]+", "_", label)


def _report_error(message: str) -> None:
  logger.error(message)
  print(f"error: {message}", file=sys.stderr)


def make_sequence(data: Dict[str, Any], n_tasks: int, seed: int) -> TaskSequence:
  """Build the task sequence a config (or a checkpoint's data descriptor) describes."""
  source = ImageSourceFactory.create_from_config(dict(data.get("source") or {}))
  return build_sequence(source, n_tasks, seed,
                        val_fraction=data.get("val_fraction", 0.1),
                        test_fraction=data.get("test_fraction", 0.2),
                        manifest=data.get("manifest"))


def run_directory_name(config: ExperimentConfig, stamp: Optional[str] = None) -> str:
  """<method>[+<method>...]-seed<seed>-<timestamp>"""
  stamp = stamp or datetime.now().strftime("%Y%m%d-%H%M%S")
  methods = "+".join(method.label for method in config.method_specs())
  return _safe_name(f"{methods}-seed{config.seed}-{stamp}")


def _check_run_dir(run_dir: Path, digest: str) -> None:
  existing = run_dir / "config.json"
  if not existing.is_file():
    return
  try:
    stored = json.loads(existing.read_text(encoding="utf-8")).get("digest")
  except (json.JSONDecodeError, AttributeError) as e:
    raise ConfigurationError(f"Unreadable {existing}: {e}") from e
  if stored != digest:
    raise ConfigurationError(f"{run_dir} holds a run of another config (digest {stored}, expected {digest})")
  logger.info("Resuming run in %s", run_dir)


def execute(config: ExperimentConfig, run_dir: Optional[Union[str, Path]] = None) -> Path:
  """
  Run every configured method and write the run directory.

  Layout:
      config.json                 resolved config and its digest
      shared_start.jsonl          training log of the shared first-task model
      methods/<label>/            checkpoint.pt, training.jsonl and task<t>_state.pt per method
      results.json, comparison.csv, timing.json, plotdata/, plots/

  An existing run directory of the same config is resumed: tasks with a task<t>_state.pt
  are restored or continued instead of retrained.

  Returns:
      Path: The run directory

  Raises:
      ConfigurationError: run_dir holds a run of a different config
  """
  digest = config.digest()
  print(f"config digest: {digest}")
  run_dir = Path(run_dir) if run_dir is not None else Path(config.out_dir) / run_directory_name(config)
  _check_run_dir(run_dir, digest)
  run_dir.mkdir(parents=True, exist_ok=True)
  (run_dir / "config.json").write_text(
      json.dumps({"config": config.resolved(), "digest": digest}, sort_keys=True, indent=2) + "\n", encoding="utf-8")

  schedule = config.run_schedule()
  methods = config.method_specs()
  sequence = make_sequence(config.data.to_dict(), config.n_tasks, config.seed)

  start = prepare_start(sequence, schedule, config.model.arch, config.model.attention_layers,
                        config.model.semantic_layer)
  start.log.write_jsonl(run_dir / "shared_start.jsonl")
  queue = RunQueue(max_workers=config.parallel_methods)
  for method in methods:
    queue.add(method.label, run_method, start, sequence, method, schedule, digest,
              run_dir / "methods" / _safe_name(method.label))
  outcomes = queue.run_all()

  for label, outcome in outcomes.items():
    method_dir = run_dir / "methods" / _safe_name(label)
    save_checkpoint(outcome.model, method_dir / CHECKPOINT_NAME, extra={
        "method": label,
        "seed": config.seed,
        "n_tasks": config.n_tasks,
        "task_ids": [task.task_id for task in sequence],
        "data": config.data.to_dict(),
        "eval_crop": schedule.eval_crop,
        "config_digest": digest,
        "discriminators": outcome.discriminator_state,
    })
    outcome.log.write_jsonl(method_dir / TRAINING_LOG_NAME)

  emit_report([outcome.result for outcome in outcomes.values()], run_dir, render=config.render_plots)
  return run_dir


def cmd_run(config_path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None,
            run_dir: Optional[Union[str, Path]] = None) -> int:
  """
  Load, validate and execute an experiment config.

  Args:
      config_path: YAML experiment file
      overrides: Keyword arguments for apply_overrides()
      run_dir: Explicit output directory; an existing one of the same config is resumed
               (default: out_dir/<methods>-seed<seed>-<timestamp>)
  """
  try:
    config = load_config(config_path)
    if overrides:
      config = apply_overrides(config, **overrides)
  except ConfigurationError as e:
    _report_error(f"invalid config {config_path}: {e}")
    return EXIT_CONFIG

  try:
    run_dir = execute(config, run_dir)
  except DivergenceError as e:
    _report_error(f"training diverged: {e}")
    return EXIT_DIVERGED
  except CheckpointError as e:
    _report_error(str(e))
    return EXIT_CHECKPOINT
  except (ConfigurationError, ValidationError, UnknownHeadError) as e:
    _report_error(str(e))
    return EXIT_CONFIG
  except OSError as e:
    _report_error(f"I/O error: {e}")
    return EXIT_CONFIG

  print(f"results written to {run_dir}")
  return EXIT_OK


def _read_descriptor(path: Union[str, Path]) -> Dict[str, Any]:
  path = Path(path)
  if not path.is_file():
    raise ConfigurationError(f"Data descriptor not found: {path}")
  try:
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
  except yaml.YAMLError as e:
    raise ConfigurationError(f"Malformed data descriptor {path}: {e}") from e
  if not isinstance(data, dict):
    raise ConfigurationError(f"Data descriptor {path} must be a mapping")
  return data


def cmd_eval(checkpoint_path: Union[str, Path], data_descriptor: Optional[Union[str, Path]] = None) -> int:
  """
  Evaluate a checkpoint on the test split of every task it has a head for.

  The data descriptor defaults to the one stored in the checkpoint. A descriptor file holds
  the config's data section (source, val_fraction, test_fraction, manifest) and may add
  seed and n_tasks. Prints {"accuracies": [...], ...} as JSON on stdout.
  """
  try:
    model, extra = load_checkpoint(checkpoint_path)
  except CheckpointError as e:
    _report_error(str(e))
    return EXIT_CHECKPOINT

  try:
    data = dict(extra.get("data") or {})
    seed = extra.get("seed", 0)
    n_tasks = extra.get("n_tasks", model.num_heads)
    if data_descriptor is not None:
      override = _read_descriptor(data_descriptor)
      seed = override.pop("seed", seed)
      n_tasks = override.pop("n_tasks", n_tasks)
      data.update(override)
    sequence = make_sequence(data, n_tasks, seed)
    if len(sequence) < model.num_heads:
      raise ValidationError(f"Checkpoint has {model.num_heads} heads but the data yields {len(sequence)} tasks")
    eval_crop = extra.get("eval_crop", 1.0)
    accuracies = [evaluate(model, sequence[j].dataset(TEST, eval_crop=eval_crop), j) for j in range(model.num_heads)]
  except (ConfigurationError, ValidationError) as e:
    _report_error(str(e))
    return EXIT_CONFIG

  print(json.dumps({
      "checkpoint": str(checkpoint_path),
      "method": extra.get("method"),
      "config_digest": extra.get("config_digest"),
      "accuracies": accuracies,
  }, sort_keys=True))
  return EXIT_OK


def cmd_plot(results_dir: Union[str, Path], render: bool = True) -> int:
  """Write plotdata/*.tsv (and plots/*.png when matplotlib is present) from results.json."""
  path = Path(results_dir) / "results.json"
  if not path.is_file():
    _report_error(f"No results.json in {results_dir}")
    return EXIT_CONFIG
  try:
    document = json.loads(path.read_text(encoding="utf-8"))
    validate_results_document(document)
  except (json.JSONDecodeError, ValidationError) as e:
    _report_error(f"Invalid results file {path}: {e}")
    return EXIT_CONFIG

  written = write_plot_data(document, results_dir, render=render)
  for item in written:
    print(item)
  return EXIT_OK
