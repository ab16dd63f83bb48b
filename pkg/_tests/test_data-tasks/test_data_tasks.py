"""
Data Tasks Test

Checks the synthetic and folder image sources, the source factory, the
normalize / augment / center-crop transforms, and task-sequence construction:
disjoint class groups, stable sample ids, train-only statistics, manifests and
seeded loader order.
"""

import json
import logging
import os
import sys
import tempfile
import traceback
from pathlib import Path

project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

try:
  import torch
  from torchvision.io import write_png

  from common.errors import ConfigurationError, ValidationError
  from common.seeding import make_generator
  from data_tasks import (  # pylint: disable=import-error
      FolderImageSource,
      ImageSourceFactory,
      NormalizationStats,
      SyntheticImageSource,
      augment,
      build_sequence,
      center_crop,
      compute_stats,
      make_loader,
      normalize
  )
  from data_tasks.tasks import SAMPLE_ID_STRIDE, TEST, TRAIN, VAL
except ImportError as e:
  print(f"Import error: {e}")
  print("Make sure you're running this script from the correct directory")
  sys.exit(1)


logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def _source(num_classes=6, samples=20, kind="mixed", seed=0):
  return SyntheticImageSource(kind=kind, num_classes=num_classes, samples_per_class=samples,
                              image_size=8, channels=3, noise=0.1, seed=seed)


def test_synthetic_source():
  """Synthetic classes are deterministic, in range and named by kind"""
  print("\n=== Synthetic Source Test ===")

  source = _source()
  assert source.class_names() == ["blobs_00", "blobs_01", "blobs_02", "stripes_00", "stripes_01", "stripes_02"]
  images = source.load_class(0)
  assert images.shape == (20, 3, 8, 8)
  assert images.min() >= 0.0 and images.max() <= 1.0
  assert torch.equal(images, _source().load_class(0)), "same seed must give identical images"
  assert not torch.equal(images, _source(seed=1).load_class(0))
  print("✓ Class images are deterministic under the seed and clamped to [0, 1]")

  described = source.describe()
  assert described["type"] == "synthetic_mixed"
  rebuilt = ImageSourceFactory.create_from_config(described)
  assert torch.equal(rebuilt.load_class(4), source.load_class(4))
  print("✓ describe() round-trips through the factory")

  for bad in ({"kind": "clouds"}, {"num_classes": 0}, {"noise": -1.0}):
    try:
      SyntheticImageSource(**bad)
      assert False, f"{bad} should be rejected"
    except ValidationError:
      pass
  try:
    source.load_class(6)
    assert False, "out-of-range class should raise"
  except ValidationError:
    pass
  print("✓ Bad arguments raise ValidationError")


def test_factory_auto_detection():
  """AFA_SOURCE_TYPE and AFA_DATA_ROOT select the source type"""
  print("\n=== Source Factory Test ===")

  saved = {key: os.environ.pop(key, None) for key in ("AFA_SOURCE_TYPE", "AFA_DATA_ROOT")}
  try:
    source = ImageSourceFactory.create_source(num_classes=4, samples_per_class=5, image_size=8)
    assert source.source_type == "synthetic_mixed"
    print("✓ Defaults to the mixed synthetic source")

    os.environ["AFA_SOURCE_TYPE"] = "synthetic_stripes"
    source = ImageSourceFactory.create_source(num_classes=4, samples_per_class=5, image_size=8)
    assert source.source_type == "synthetic_stripes"
    print("✓ AFA_SOURCE_TYPE overrides the default")

    del os.environ["AFA_SOURCE_TYPE"]
    with tempfile.TemporaryDirectory() as tmp:
      (Path(tmp) / "cat").mkdir()
      os.environ["AFA_DATA_ROOT"] = tmp
      source = ImageSourceFactory.create_source(image_size=8)
      assert isinstance(source, FolderImageSource)
      assert source.class_names() == ["cat"]
    print("✓ AFA_DATA_ROOT selects the folder source")
    del os.environ["AFA_DATA_ROOT"]

    for kwargs in ({"source_type": "imagenet"}, {"source_type": "synthetic", "colour": True},
                   {"source_type": "folder"}):
      try:
        ImageSourceFactory.create_source(**kwargs)
        assert False, f"{kwargs} should be rejected"
      except ConfigurationError:
        pass
    print("✓ Unknown types, bad arguments and a rootless folder source raise ConfigurationError")
  finally:
    for key, value in saved.items():
      os.environ.pop(key, None)
      if value is not None:
        os.environ[key] = value


def test_folder_source():
  """Class folders decode to resized float images"""
  print("\n=== Folder Source Test ===")

  with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    for name, value in (("bird", 40), ("car", 200)):
      (root / name).mkdir()
      for i in range(3):
        write_png(torch.full((3, 12, 12), value + i, dtype=torch.uint8), str(root / name / f"{i}.png"))
    (root / "car" / "notes.txt").write_text("ignored", encoding="utf-8")

    source = FolderImageSource(root, image_size=8, max_per_class=2)
    assert source.class_names() == ["bird", "car"]
    images = source.load_class(1)
    assert images.shape == (2, 3, 8, 8)
    assert torch.allclose(images[0], torch.full((3, 8, 8), 200 / 255.0), atol=1e-3)
    print("✓ Images decode, resize, scale to [0, 1] and respect max_per_class")

  try:
    FolderImageSource("/nonexistent/dataset/root")
    assert False, "missing root should raise"
  except ConfigurationError:
    pass
  print("✓ Missing root raises ConfigurationError")


def test_normalize():
  """Per-channel normalization"""
  print("\n=== Normalize Test ===")

  image = torch.rand(3, 5, 5)
  assert torch.equal(normalize(image, NormalizationStats((0.0,) * 3, (1.0,) * 3)), image)
  print("✓ mean 0 / std 1 is the identity")

  stats = NormalizationStats((0.2, 0.4, 0.6), (0.1, 0.2, 0.3))
  constant = torch.tensor(stats.mean).reshape(3, 1, 1).expand(3, 4, 4).clone()
  assert torch.allclose(normalize(constant, stats), torch.zeros(3, 4, 4), atol=1e-6)
  print("✓ An image equal to the mean normalizes to zeros")

  batch = torch.rand(50, 3, 6, 6) * torch.tensor([0.5, 1.0, 2.0]).reshape(1, 3, 1, 1)
  normalized = normalize(batch, compute_stats(batch))
  per_channel = normalized.transpose(0, 1).reshape(3, -1)
  assert per_channel.mean(dim=1).abs().max() < 1e-5
  assert (per_channel.std(dim=1, unbiased=False) - 1.0).abs().max() < 1e-3
  print("✓ A normalized batch has per-channel mean 0 and std 1")

  for bad in (NormalizationStats((0.0,) * 3, (1.0, 0.0, 1.0)), NormalizationStats((0.0,), (1.0,))):
    try:
      normalize(image, bad)
      assert False, "bad stats should be rejected"
    except ValidationError:
      pass
  try:
    NormalizationStats((0.0, 0.0), (1.0,))
    assert False, "length mismatch should raise"
  except ValidationError:
    pass
  print("✓ Zero std and channel mismatches raise ValidationError")


def test_augment_and_center_crop():
  """Augmentation is seeded and never mixes colour channels"""
  print("\n=== Augment Test ===")

  image = torch.rand(3, 16, 16)
  first = augment(image, make_generator(7, "augment", 0))
  second = augment(image, make_generator(7, "augment", 0))
  assert first.shape == image.shape
  assert torch.equal(first, second), "same stream must give a bitwise identical image"
  differs = any(not torch.equal(first, augment(image, make_generator(7, "augment", k))) for k in range(1, 6))
  assert differs
  print("✓ Same seed stream gives the same output")

  flipped = torch.flip(image, dims=[-1])
  assert torch.equal(torch.flip(flipped, dims=[-1]), image)
  assert torch.allclose(flipped.mean(dim=(1, 2)), image.mean(dim=(1, 2)), atol=1e-6)
  print("✓ Flip is an involution and preserves per-channel means")

  coloured = torch.stack([torch.full((16, 16), 0.1), torch.full((16, 16), 0.5), torch.full((16, 16), 0.9)])
  for k in range(5):
    out = augment(coloured, make_generator(3, "augment", k))
    assert torch.allclose(out.mean(dim=(1, 2)), torch.tensor([0.1, 0.5, 0.9]), atol=1e-4)
  print("✓ Flat colour planes survive augmentation unchanged")

  assert torch.equal(center_crop(image, 1.0), image)
  cropped = center_crop(image, 0.5)
  assert cropped.shape == image.shape
  for bad in (0.0, 1.5):
    try:
      center_crop(image, bad)
      assert False, f"fraction {bad} should be rejected"
    except ValidationError:
      pass
  print("✓ center_crop is the identity at 1.0 and keeps the shape otherwise")


def test_build_sequence():
  """Disjoint class groups, stable ids and train-only statistics"""
  print("\n=== Build Sequence Test ===")

  source = _source(num_classes=10, samples=20)
  sequence = build_sequence(source, 5, seed=11)
  assert len(sequence) == 5
  assert sequence.class_counts == [2] * 5
  name_sets = [set(task.class_names) for task in sequence]
  assert set().union(*name_sets) == set(source.class_names())
  for i in range(5):
    for j in range(i + 1, 5):
      assert not name_sets[i] & name_sets[j]
  print("✓ 10 classes split into five disjoint 2-class tasks covering the source")

  again = build_sequence(source, 5, seed=11)
  assert [t.class_names for t in again] == [t.class_names for t in sequence]
  assert all(torch.equal(a.train.images, b.train.images) for a, b in zip(again, sequence))
  print("✓ The same seed gives the same assignment and partitions")

  names = source.class_names()
  for task in sequence:
    ids = [set(task.partition(split).sample_ids.tolist()) for split in (TRAIN, VAL, TEST)]
    assert not ids[0] & ids[1] and not ids[0] & ids[2] and not ids[1] & ids[2]
    assert (len(task.train), len(task.val), len(task.test)) == (28, 4, 8)
    labels = task.train.labels
    assert labels.min() >= 0 and labels.max() < task.class_count
    for label, name in enumerate(task.class_names):
      expected_class = names.index(name)
      chosen = task.test.sample_ids[task.test.labels == label]
      assert all(int(sid) // SAMPLE_ID_STRIDE == expected_class for sid in chosen)
  print("✓ Partitions are disjoint with labels in range and ids encoding the source class")

  task = sequence[0]
  stats = compute_stats(task.train.images)
  assert stats == task.stats
  assert compute_stats(torch.cat([task.train.images, task.test.images])) != task.stats
  print("✓ Normalization stats come from the training split only")

  first = {"tasks": [["blobs_00", "blobs_01"], ["stripes_00", "stripes_01"]]}
  second = {"tasks": [["blobs_00", "blobs_01"], ["stripes_02", "blobs_02"]]}
  stats_a = build_sequence(_source(), 2, seed=11, manifest=first)
  stats_b = build_sequence(_source(), 2, seed=11, manifest=second)
  assert stats_a[0].stats == stats_b[0].stats
  assert stats_a[1].stats != stats_b[1].stats
  print("✓ Task stats do not depend on other tasks")

  try:
    build_sequence(_source(num_classes=5), 3, seed=0)
    assert False, "too few classes should raise"
  except ConfigurationError:
    pass
  print("✓ Too few classes raise ConfigurationError")


def test_manifest():
  """A manifest replaces the seeded class assignment"""
  print("\n=== Manifest Test ===")

  source = _source(num_classes=6, samples=10)
  manifest = {"tasks": [["stripes_00", "blobs_01"], ["blobs_00", "stripes_02", "blobs_02"]]}
  sequence = build_sequence(source, 2, seed=0, manifest=manifest)
  assert sequence[0].class_names == ["stripes_00", "blobs_01"]
  assert sequence.class_counts == [2, 3]

  with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tasks.json"
    path.write_text(json.dumps(manifest), encoding="utf-8")
    from_file = build_sequence(source, 2, seed=0, manifest=path)
    assert [t.class_names for t in from_file] == [t.class_names for t in sequence]
  print("✓ Dict and JSON-file manifests give the declared tasks")

  for bad in ({"tasks": [["blobs_00", "blobs_01"]]},
              {"tasks": [["blobs_00", "blobs_01"], ["blobs_01", "blobs_02"]]},
              {"tasks": [["blobs_00", "zebra"], ["blobs_01", "blobs_02"]]},
              {"classes": []}):
    try:
      build_sequence(source, 2, seed=0, manifest=bad)
      assert False, f"{bad} should be rejected"
    except ConfigurationError:
      pass
  print("✓ Wrong task counts, repeated or unknown classes raise ConfigurationError")


def test_loader_determinism():
  """Loader order and augmented batches repeat under a fixed seed"""
  print("\n=== Loader Determinism Test ===")

  task = build_sequence(_source(num_classes=4, samples=20), 2, seed=5)[0]

  def epoch_ids(seed, epoch):
    dataset = task.dataset(TRAIN, augment_images=True, seed=seed)
    dataset.set_epoch(epoch)
    ids, images = [], []
    for batch, _, sample_ids in make_loader(dataset, 8, seed, "train", epoch):
      ids.extend(sample_ids.tolist())
      images.append(batch)
    return ids, torch.cat(images)

  ids_a, images_a = epoch_ids(5, 0)
  ids_b, images_b = epoch_ids(5, 0)
  assert ids_a == ids_b and torch.equal(images_a, images_b)
  assert sorted(ids_a) == sorted(task.train.sample_ids.tolist())
  print("✓ Same seed and epoch give identical order and pixels")

  ids_c, _ = epoch_ids(5, 1)
  assert ids_c != ids_a and sorted(ids_c) == sorted(ids_a)
  print("✓ A new epoch reshuffles the same samples")

  test_ids = [int(i) for _, _, batch in make_loader(task.dataset(TEST), 4, 0, shuffle=False) for i in batch]
  assert test_ids == task.test.sample_ids.tolist()
  print("✓ Unshuffled loaders keep partition order")


def main():
  """Run all tests."""
  print("Data Tasks Test Suite")
  print("=" * 60)

  try:
    test_synthetic_source()
    test_factory_auto_detection()
    test_folder_source()
    test_normalize()
    test_augment_and_center_crop()
    test_build_sequence()
    test_manifest()
    test_loader_determinism()

    print("\n" + "=" * 60)
    print("🎉 All data tasks tests completed successfully!")

  except Exception as e:  # pylint: disable=broad-exception-caught
    print(f"\n❌ Test failed: {str(e)}")
    traceback.print_exc()
    sys.exit(1)


if __name__ == "__main__":
  main()
