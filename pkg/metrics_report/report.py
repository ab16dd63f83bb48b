"""
Result persistence: results.json, comparison.csv, plot data and optional plots.

Reference conventions of the comparison table: an old task is compared against joint
training, the newest task against finetuning. Cells render as "54.71 (-0.40)".

All files are written with stable key order and fixed float formatting, so identical
results produce identical bytes. The only volatile field is results.json's generated_at;
timing and resource figures go to timing.json.
"""

import csv
import io
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import psutil

from common.errors import ValidationError
from .metrics import SequenceResult, average_accuracy, derived_metrics, drop_vs_reference

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_DIGITS = 6
FINETUNE = "finetune"
JOINT = "joint"


def _round(value: Any) -> Any:
  if isinstance(value, float):
    return round(value, FLOAT_DIGITS)
  if isinstance(value, list):
    return [_round(v) for v in value]
  if isinstance(value, dict):
    return {k: _round(v) for k, v in value.items()}
  return value


def _dump(data: Any) -> str:
  return json.dumps(_round(data), sort_keys=True, indent=2) + "\n"


def _pct(value: float) -> str:
  return f"{value * 100.0:.2f}"


def format_delta(delta: float) -> str:
  """Signed two-decimal delta in parentheses, e.g. "(-0.40)" or "(+1.09)"."""
  text = f"{delta:+.2f}"
  if text in ("-0.00", "+0.00"):
    text = "+0.00"
  return f"({text})"


def format_cell(accuracy: float, reference: Optional[float]) -> str:
  """Accuracy (fraction) as a percentage with its delta against reference."""
  if reference is None:
    return _pct(accuracy)
  return f"{_pct(accuracy)} {format_delta(drop_vs_reference(accuracy, reference))}"


def results_document(results: Sequence[SequenceResult], generated_at: Optional[str] = None) -> Dict[str, Any]:
  """Build the results.json document (schema_version, generated_at, runs)."""
  finetune = next((r for r in results if r.method == FINETUNE), None)
  runs = []
  for result in results:
    run = result.to_dict()
    run["derived"] = derived_metrics(result, finetune)
    run["derived"]["average_accuracy"] = [average_accuracy(result, s) for s in range(result.n_tasks)]
    runs.append(run)
  return {
      "schema_version": SCHEMA_VERSION,
      "generated_at": generated_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
      "runs": runs,
  }


def validate_results_document(document: Dict[str, Any]) -> None:
  """
  Check a results document against the schema.

  Raises:
      ValidationError: Missing or malformed fields
  """
  if document.get("schema_version") != SCHEMA_VERSION:
    raise ValidationError(f"Unsupported schema_version {document.get('schema_version')!r}")
  runs = document.get("runs")
  if not isinstance(runs, list) or not runs:
    raise ValidationError("results document needs a non-empty 'runs' list")
  for run in runs:
    for key, kind in (("method", str), ("seed", int), ("config_digest", str), ("tasks", list),
                      ("accuracy_matrix", list), ("derived", dict)):
      if not isinstance(run.get(key), kind):
        raise ValidationError(f"Run field {key!r} missing or not a {kind.__name__}")
    for task in run["tasks"]:
      if not isinstance(task, dict) or "id" not in task or "classes" not in task:
        raise ValidationError("Each task needs 'id' and 'classes'")
    matrix = run["accuracy_matrix"]
    if len(matrix) != len(run["tasks"]):
      raise ValidationError("accuracy_matrix needs one row per task")
    for i, row in enumerate(matrix):
      if len(row) != i + 1 or any(not 0.0 <= v <= 1.0 for v in row):
        raise ValidationError(f"accuracy_matrix row {i} malformed")
    for key in ("avg_forgetting", "new_task_gain"):
      if not isinstance(run["derived"].get(key), list):
        raise ValidationError(f"derived.{key} missing")


def results_from_document(document: Dict[str, Any]) -> List[SequenceResult]:
  validate_results_document(document)
  return [SequenceResult(method=run["method"], seed=run["seed"], config_digest=run["config_digest"],
                         tasks=run["tasks"], accuracy_matrix=run["accuracy_matrix"])
          for run in document["runs"]]


def comparison_table(results: Sequence[SequenceResult]) -> str:
  """
  CSV with one row per method and one column per task plus the average delta.

  Task columns hold the final accuracy of each task. Old tasks carry the delta against
  joint training, the last task the delta against finetuning; the average column is the
  arithmetic mean of the printed deltas.
  """
  by_method = {r.method: r for r in results}
  joint = by_method.get(JOINT)
  finetune = by_method.get(FINETUNE)
  n_tasks = max(r.n_tasks for r in results)

  buffer = io.StringIO()
  writer = csv.writer(buffer, lineterminator="\n")
  writer.writerow(["method"] + [f"task_{j + 1}" for j in range(n_tasks)] + ["average_delta"])
  for result in results:
    final = result.accuracy_matrix[-1]
    cells, deltas = [], []
    for j, accuracy in enumerate(final):
      newest = j == len(final) - 1
      reference_run = finetune if newest else joint
      reference = None
      if reference_run is not None and reference_run is not result and reference_run.n_tasks == result.n_tasks:
        reference = reference_run.accuracy_matrix[-1][j]
        deltas.append(round(drop_vs_reference(accuracy, reference), 2))
      cells.append(format_cell(accuracy, reference))
    average = f"{sum(deltas) / len(deltas):+.2f}" if deltas else ""
    writer.writerow([result.method] + cells + [""] * (n_tasks - len(cells)) + [average])
  return buffer.getvalue()


def _tsv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
  lines = ["\t".join(header)]
  for row in rows:
    lines.append("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
  return "\n".join(lines) + "\n"


def plot_data(document: Dict[str, Any]) -> Dict[str, str]:
  """
  Plot-data files derived from a results document.

  Returns:
      Dict[str, str]: file name -> TSV text for per-task final accuracies (bars), average
      forgetting per stage and new-task gain per stage (curves)
  """
  bars, forgetting, gain = [], [], []
  for run in document["runs"]:
    method = run["method"]
    for j, accuracy in enumerate(run["accuracy_matrix"][-1]):
      bars.append([method, j + 1, round(accuracy * 100.0, 4)])
    for offset, value in enumerate(run["derived"]["avg_forgetting"]):
      forgetting.append([method, offset + 2, round(value, 4)])
    for offset, value in enumerate(run["derived"]["new_task_gain"]):
      gain.append([method, offset + 2, round(value, 4)])
  return {
      "per_task_final.tsv": _tsv(["method", "task", "accuracy_pct"], bars),
      "avg_forgetting.tsv": _tsv(["method", "upto_task", "avg_forgetting_pp"], forgetting),
      "new_task_gain.tsv": _tsv(["method", "task", "gain_vs_finetune_pp"], gain),
  }


def render_plots(document: Dict[str, Any], out_dir: Union[str, Path]) -> List[Path]:
  """Render PNG plots when matplotlib is installed; returns the written paths."""
  try:
    import matplotlib  # pylint: disable=import-outside-toplevel
    matplotlib.use("Agg")
    from matplotlib import pyplot as plt  # pylint: disable=import-outside-toplevel
  except ImportError:
    logger.info("matplotlib not available, skipping plot rendering")
    return []

  out_dir = Path(out_dir)
  out_dir.mkdir(parents=True, exist_ok=True)
  written = []
  runs = document["runs"]

  figure, axis = plt.subplots(figsize=(7, 4))
  width = 0.8 / max(1, len(runs))
  for index, run in enumerate(runs):
    final = run["accuracy_matrix"][-1]
    axis.bar([j + 1 + index * width for j in range(len(final))], [a * 100.0 for a in final], width=width,
             label=run["method"])
  axis.set_xlabel("task")
  axis.set_ylabel("accuracy (%)")
  axis.legend()
  figure.savefig(out_dir / "per_task_final.png", dpi=120, bbox_inches="tight")
  plt.close(figure)
  written.append(out_dir / "per_task_final.png")

  for key, ylabel in (("avg_forgetting", "avg. drop on old tasks (pp)"), ("new_task_gain", "gain vs finetune (pp)")):
    figure, axis = plt.subplots(figsize=(6, 4))
    for run in runs:
      values = run["derived"][key]
      if values:
        axis.plot(list(range(2, len(values) + 2)), values, marker="o", label=run["method"])
    axis.set_xlabel("task")
    axis.set_ylabel(ylabel)
    axis.legend()
    figure.savefig(out_dir / f"{key}.png", dpi=120, bbox_inches="tight")
    plt.close(figure)
    written.append(out_dir / f"{key}.png")
  return written


def write_plot_data(document: Dict[str, Any], out_dir: Union[str, Path], render: bool = True) -> List[Path]:
  out_dir = Path(out_dir)
  data_dir = out_dir / "plotdata"
  data_dir.mkdir(parents=True, exist_ok=True)
  written = []
  for name, text in plot_data(document).items():
    path = data_dir / name
    path.write_text(text, encoding="utf-8")
    written.append(path)
  if render:
    written.extend(render_plots(document, out_dir / "plots"))
  return written


def emit_report(results: Sequence[SequenceResult],
                out_dir: Union[str, Path],
                generated_at: Optional[str] = None,
                render: bool = True) -> List[Path]:
  """
  Write results.json, comparison.csv, timing.json, plotdata/*.tsv and (optionally) plots/*.png.

  Raises:
      ValidationError: No results
      OSError: Unwritable directory
  """
  if not results:
    raise ValidationError("emit_report needs at least one result")
  out_dir = Path(out_dir)
  out_dir.mkdir(parents=True, exist_ok=True)

  document = results_document(results, generated_at)
  validate_results_document(_round(document))
  written = []

  path = out_dir / "results.json"
  path.write_text(_dump(document), encoding="utf-8")
  written.append(path)

  path = out_dir / "comparison.csv"
  path.write_text(comparison_table(results), encoding="utf-8")
  written.append(path)

  process = psutil.Process()
  timing = {
      "runs": {r.method: r.timing for r in results},
      "peak_rss_mb": process.memory_info().rss / (1024 * 1024),
      "cpu_seconds": sum(process.cpu_times()[:2]),
  }
  path = out_dir / "timing.json"
  path.write_text(json.dumps(timing, sort_keys=True, indent=2) + "\n", encoding="utf-8")
  written.append(path)

  written.extend(write_plot_data(json.loads(_dump(document)), out_dir, render=render))
  logger.info("Report for %d run(s) written to %s", len(results), out_dir)
  return written
