"""
Metrics Report Test

Checks accuracy evaluation against a per-sample recount, the forgetting and
gain metrics, the comparison-table formatting, and the stability and schema of
the emitted report files.
"""

import json
import logging
import math
import sys
import tempfile
import traceback
from pathlib import Path

project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

try:
  import torch
  from torch.utils.data import TensorDataset

  from common.errors import ValidationError
  from metrics_report import (  # pylint: disable=import-error
      SequenceResult,
      average_accuracy,
      avg_forgetting,
      comparison_table,
      derived_metrics,
      drop_vs_reference,
      emit_report,
      evaluate,
      format_cell,
      format_delta,
      new_task_gain,
      plot_data,
      results_document,
      results_from_document,
      validate_results_document
  )
  from model_core import build_backbone
except ImportError as e:
  print(f"Import error: {e}")
  print("Make sure you're running this script from the correct directory")
  sys.exit(1)


logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SMALL_ARCH = [
    {"type": "conv", "out_channels": 4, "kernel_size": 3, "pool": 2},
    {"type": "fc", "units": 8},
]
TASKS = [{"id": 0, "classes": 2}, {"id": 1, "classes": 2}]
GENERATED_AT = "2024-01-01T00:00:00+00:00"


def _result(method, matrix, tasks=None):
  return SequenceResult(method=method, seed=0, config_digest="abc123", tasks=tasks or TASKS,
                        accuracy_matrix=matrix, timing={"method_seconds": 1.5})


def _results():
  return [
      _result("finetune", [[0.80], [0.4012, 0.6279]]),
      _result("joint", [[0.5511], [0.5511, 0.6150]]),
      _result("afa", [[0.80], [0.5471, 0.6388]]),
  ]


def test_evaluate():
  """Accuracy equals a per-sample recount; ties go to class 0"""
  print("\n=== Evaluate Test ===")

  model = build_backbone(SMALL_ARCH, [3], in_channels=3, image_size=8, seed=2)
  images = torch.randn(37, 3, 8, 8, generator=torch.Generator().manual_seed(1))
  labels = torch.randint(0, 3, (37,), generator=torch.Generator().manual_seed(2))

  model.eval()
  correct = 0
  with torch.no_grad():
    for image, label in zip(images, labels):
      logits = model(image.unsqueeze(0), 0)[0].tolist()
      correct += int(logits.index(max(logits)) == int(label))
  assert evaluate(model, TensorDataset(images, labels), 0, batch_size=8) == correct / 37
  print("✓ Matches a brute-force per-sample recount")

  with torch.no_grad():
    own = model(images, 0).argmax(dim=1)
  assert evaluate(model, TensorDataset(images, own), 0) == 1.0
  print("✓ Labels equal to the predictions give 1.0")

  with torch.no_grad():
    model.task_heads[0].weight.zero_()
    model.task_heads[0].bias.zero_()
  balanced = torch.tensor([0, 1] * 10)
  assert evaluate(model, TensorDataset(images[:20], balanced), 0) == 0.5
  print("✓ All-tied logits predict class 0: 0.5 on a balanced two-class set")

  model.train()
  evaluate(model, TensorDataset(images, labels), 0)
  assert model.training, "previous mode should be restored"
  try:
    evaluate(model, TensorDataset(images[:0], labels[:0]), 0)
    assert False, "empty set should raise"
  except ValidationError:
    pass
  print("✓ Mode is restored and an empty test set raises ValidationError")


def test_metric_algebra():
  """Reference deltas, forgetting and gains"""
  print("\n=== Metric Algebra Test ===")

  assert format_delta(drop_vs_reference(0.5471, 0.5511)) == "(-0.40)"
  assert format_delta(drop_vs_reference(0.6388, 0.6279)) == "(+1.09)"
  assert drop_vs_reference(0.42, 0.42) == 0.0
  assert drop_vs_reference(0.5471, 0.5511) == -drop_vs_reference(0.5511, 0.5471)
  assert format_delta(-0.001) == "(+0.00)"
  print("✓ Deltas print as (-0.40) / (+1.09) and are antisymmetric")

  assert format_delta(drop_vs_reference(54.71, 55.11, percent=True)) == "(-0.40)"
  assert abs(drop_vs_reference(0.5, 0.9, percent=True) - (-0.4)) < 1e-12
  assert abs(drop_vs_reference(0.5, 0.9) - (-40.0)) < 1e-9
  for args in ((54.71, 55.11), (1.2, 0.5), (-0.1, 0.5)):
    try:
      drop_vs_reference(*args)
      assert False, f"{args} should raise"
    except ValidationError:
      pass
  try:
    drop_vs_reference(101.0, 50.0, percent=True)
    assert False, "101 percent should raise"
  except ValidationError:
    pass
  print("✓ Units are explicit: fractions by default, percent=True for percentages, out-of-range inputs raise")

  assert format_cell(0.5471, 0.5511) == "54.71 (-0.40)"
  assert format_cell(0.5471, None) == "54.71"
  print("✓ Cells read 54.71 (-0.40)")

  flat = _result("flat", [[0.6], [0.6, 0.7], [0.6, 0.7, 0.8]],
                 tasks=[{"id": i, "classes": 2} for i in range(3)])
  assert avg_forgetting(flat, 2) == 0.0 and avg_forgetting(flat, 3) == 0.0
  assert math.isclose(avg_forgetting(_result("x", [[0.8], [0.7, 0.9]]), 2), -10.0)
  three = _result("y", [[0.9], [0.8, 0.85], [0.7, 0.75, 0.95]], tasks=[{"id": i, "classes": 2} for i in range(3)])
  assert math.isclose(avg_forgetting(three, 3), -15.0)
  for bad in (1, 4):
    try:
      avg_forgetting(three, bad)
      assert False, f"upto_task {bad} should be rejected"
    except ValidationError:
      pass
  print("✓ avg_forgetting: 0 without forgetting, -10 and -15 on fixed matrices")

  method = _result("afa", [[0.8], [0.6, 0.6373]])
  finetune = _result("finetune", [[0.8], [0.4, 0.6037]])
  assert abs(new_task_gain(method, finetune, 2) - 3.36) < 1e-9
  assert new_task_gain(method, finetune, 2) == -new_task_gain(finetune, method, 2)
  assert new_task_gain(method, method, 2) == 0.0
  other = _result("other", [[0.8], [0.6, 0.6]], tasks=[{"id": 5, "classes": 2}, {"id": 6, "classes": 2}])
  try:
    new_task_gain(method, other, 2)
    assert False, "different sequences should raise"
  except ValidationError:
    pass
  print("✓ new_task_gain: +3.36, antisymmetric, rejects mismatched sequences")

  assert math.isclose(average_accuracy(three), (0.7 + 0.75 + 0.95) / 3)
  derived = derived_metrics(method, finetune)
  assert len(derived["avg_forgetting"]) == 1 and len(derived["new_task_gain"]) == 1
  assert derived_metrics(method)["new_task_gain"] == []
  print("✓ Derived metrics per stage")

  for bad in ([[0.5], [0.5]], [[1.5]]):
    try:
      _result("bad", bad)
      assert False, f"{bad} should be rejected"
    except ValidationError:
      pass
  print("✓ Malformed accuracy matrices raise ValidationError")


def test_comparison_table():
  """Old tasks against joint, the newest against finetune"""
  print("\n=== Comparison Table Test ===")

  lines = comparison_table(_results()).splitlines()
  assert lines[0] == "method,task_1,task_2,average_delta"
  rows = {line.split(",")[0]: line.split(",") for line in lines[1:]}
  assert rows["afa"][1:3] == ["54.71 (-0.40)", "63.88 (+1.09)"]
  assert rows["joint"][1] == "55.11"
  assert rows["finetune"][2] == "62.79" and rows["finetune"][1] == "40.12 (-14.99)"
  assert rows["finetune"][3] == "-14.99"
  print("✓ Cells carry the delta against the right reference")


def test_emit_report():
  """Schema, byte-stable re-emission and plot data"""
  print("\n=== Emit Report Test ===")

  with tempfile.TemporaryDirectory() as tmp:
    first, second = Path(tmp) / "a", Path(tmp) / "b"
    emit_report(_results(), first, generated_at=GENERATED_AT, render=False)
    emit_report(_results(), second, generated_at=GENERATED_AT, render=False)
    for name in ("results.json", "comparison.csv", "plotdata/per_task_final.tsv",
                 "plotdata/avg_forgetting.tsv", "plotdata/new_task_gain.tsv"):
      assert (first / name).read_bytes() == (second / name).read_bytes(), f"{name} differs"
    assert (first / "timing.json").is_file()
    assert not (first / "plots").exists()
    print("✓ Identical results give byte-identical files")

    document = json.loads((first / "results.json").read_text(encoding="utf-8"))
    validate_results_document(document)
    assert document["schema_version"] == 1
    afa = next(run for run in document["runs"] if run["method"] == "afa")
    assert set(afa) == {"method", "seed", "config_digest", "tasks", "accuracy_matrix", "derived"}
    assert afa["derived"]["new_task_gain"] == [round(100.0 * (0.6388 - 0.6279), 6)]
    restored = results_from_document(document)
    assert [r.to_dict() for r in restored] == [r.to_dict() for r in _results()]
    print("✓ results.json validates and restores the inputs")

    bars = (first / "plotdata" / "per_task_final.tsv").read_text(encoding="utf-8").splitlines()
    assert bars[0] == "method\ttask\taccuracy_pct"
    assert "afa\t1\t54.7100" in bars
    print("✓ Plot data holds per-task final accuracies")

  document = results_document(_results(), GENERATED_AT)
  for mutate in (lambda d: d.update(schema_version=2),
                 lambda d: d["runs"][0]["accuracy_matrix"][1].append(0.5),
                 lambda d: d["runs"][0].pop("derived"),
                 lambda d: d.update(runs=[])):
    broken = json.loads(json.dumps(document))
    mutate(broken)
    try:
      validate_results_document(broken)
      assert False, "broken document should be rejected"
    except ValidationError:
      pass
  assert set(plot_data(document)) == {"per_task_final.tsv", "avg_forgetting.tsv", "new_task_gain.tsv"}
  try:
    emit_report([], "unused")
    assert False, "no results should raise"
  except ValidationError:
    pass
  print("✓ Schema violations and empty result sets raise ValidationError")


def main():
  """Run all tests."""
  print("Metrics Report Test Suite")
  print("=" * 60)

  try:
    test_evaluate()
    test_metric_algebra()
    test_comparison_table()
    test_emit_report()

    print("\n" + "=" * 60)
    print("🎉 All metrics report tests completed successfully!")

  except Exception as e:  # pylint: disable=broad-exception-caught
    print(f"\n❌ Test failed: {str(e)}")
    traceback.print_exc()
    sys.exit(1)


if __name__ == "__main__":
  main()
