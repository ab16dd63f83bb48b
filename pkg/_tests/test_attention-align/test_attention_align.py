"""
Attention Align Test

Covers attention maps and their normalization, the discriminator losses with their
gradient isolation, the interleaved adversarial step, bundle maps, chance level against
a real snapshot and the per-tap discriminator bank.
All numeric checks run in float64.
"""

import copy
import logging
import math
import sys
import traceback
from pathlib import Path

project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

try:
  import torch
  from torch import nn

  from attention_align import (  # pylint: disable=import-error
      EPSILON,
      Discriminator,
      DiscriminatorBank,
      adv_step,
      attention_features,
      attention_map,
      discriminator_accuracy,
      discriminator_loss,
      feature_adv_loss,
      make_optimizer,
      normalize_attention,
      with_attention
  )
  from common.errors import ValidationError
  from model_core import build_backbone, forward_capture, snapshot
except ImportError as e:
  print(f"Import error: {e}")
  print("Make sure you're running this script from the correct directory")
  sys.exit(1)


logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

TOLERANCE = 1e-4


class ConstantDiscriminator(nn.Module):
  """Outputs a fixed probability for every input."""

  def __init__(self, value: float):
    super().__init__()
    self.value = value

  def forward(self, z: torch.Tensor) -> torch.Tensor:
    return torch.full((z.shape[0],), self.value, dtype=z.dtype)


class ThresholdDiscriminator(nn.Module):
  """0.9 for maps with positive mass, 0.1 otherwise."""

  def forward(self, z: torch.Tensor) -> torch.Tensor:
    total = z.reshape(z.shape[0], -1).sum(dim=1)
    return torch.where(total > 0, torch.full_like(total, 0.9), torch.full_like(total, 0.1))


def _half_discriminator(in_features: int) -> Discriminator:
  """A real Discriminator whose output is exactly sigmoid(0) = 0.5."""
  d = Discriminator(in_features, hidden_units=8).double()
  with torch.no_grad():
    d.layers[2].weight.zero_()
    d.layers[2].bias.zero_()
  return d


def test_attention_map():
  """Channel sums of squares, non-negativity and permutation invariance."""
  print("\n=== Attention Map Test ===")

  zero = attention_map(torch.zeros(2, 2, 2, dtype=torch.float64))
  assert torch.equal(zero, torch.zeros(2, 2, dtype=torch.float64))
  print("✓ All-zero activation gives an all-zero map")

  single = attention_map(torch.tensor([[[1.0, -2.0], [3.0, 4.0]]], dtype=torch.float64))
  assert torch.equal(single, torch.tensor([[1.0, 4.0], [9.0, 16.0]], dtype=torch.float64))
  two = attention_map(torch.tensor([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 2.0], [1.0, 0.0]]], dtype=torch.float64))
  assert torch.equal(two, torch.tensor([[1.0, 4.0], [1.0, 1.0]], dtype=torch.float64))
  print("✓ Element-wise squares summed over channels")

  batch = torch.randn(4, 5, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
  maps = attention_map(batch)
  assert maps.shape == (4, 3, 3)
  assert bool((maps >= 0).all())
  print("✓ Batched maps are non-negative with the spatial shape")

  integers = torch.randint(-5, 6, (2, 6, 4, 4), generator=torch.Generator().manual_seed(1)).double()
  permuted = integers[:, torch.randperm(6, generator=torch.Generator().manual_seed(2))]
  assert torch.equal(attention_map(integers), attention_map(permuted))
  print("✓ Invariant under channel permutations")

  for bad in (torch.zeros(0, 2, 2), torch.zeros(3, 3), torch.zeros(1, 1, 1, 1, 1)):
    try:
      attention_map(bad)
      assert False, f"shape {tuple(bad.shape)} should be rejected"
    except ValidationError:
      pass
  print("✓ Empty or wrongly ranked activations rejected")


def test_normalize_attention():
  """Unit L2 norm per sample; zero maps pass through."""
  print("\n=== Normalize Attention Test ===")

  zero = torch.zeros(2, 2, dtype=torch.float64)
  assert torch.equal(normalize_attention(zero), zero)
  unit = normalize_attention(torch.tensor([[3.0, 4.0], [0.0, 0.0]], dtype=torch.float64))
  assert torch.allclose(unit, torch.tensor([[0.6, 0.8], [0.0, 0.0]], dtype=torch.float64), atol=1e-12)
  print("✓ Zero passthrough and 3-4-5 example")

  maps = attention_map(torch.randn(5, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3)))
  maps[2] = 0.0
  normalized = normalize_attention(maps)
  norms = normalized.reshape(5, -1).norm(dim=1)
  for i in (0, 1, 3, 4):
    assert abs(norms[i].item() - 1.0) < 1e-12
  assert norms[2].item() == 0.0
  print("✓ Batched normalization is per sample")

  features = attention_features(torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(4)))
  assert features.shape == (2, 16)
  print("✓ attention_features flattens normalized maps")


def test_discriminator():
  """Output range and architecture."""
  print("\n=== Discriminator Test ===")

  d = Discriminator(16, hidden_units=32).double()
  outputs = d(torch.randn(10, 4, 4, dtype=torch.float64) * 1e3)
  assert outputs.shape == (10,)
  assert bool((outputs >= EPSILON).all()) and bool((outputs <= 1 - EPSILON).all())
  assert d.layers[0].out_features == 32
  print("✓ Outputs clamped inside (0, 1) even for extreme inputs")

  backbone = build_backbone(None, [2])
  backbone_ids = {id(p) for p in backbone.parameters()}
  assert not any(id(p) in backbone_ids for p in d.parameters())
  print("✓ Discriminator parameters are disjoint from the backbone")

  for args in ((0, 10), (4, 0)):
    try:
      Discriminator(*args)
      assert False, "non-positive sizes should raise"
    except ValidationError:
      pass
  print("✓ Invalid sizes rejected")


def test_losses():
  """Analytic values of both adversarial losses."""
  print("\n=== Adversarial Loss Values Test ===")

  z_old = torch.rand(6, 4, 4, dtype=torch.float64) + 0.1
  z_new = torch.rand(6, 4, 4, dtype=torch.float64) + 0.1
  half = _half_discriminator(16)
  value = discriminator_loss(half, z_old, z_new).item()
  assert abs(value - (-2 * math.log(2))) < TOLERANCE, value
  print(f"✓ D = 0.5 gives {value:.4f} (-2 ln 2)")

  value = discriminator_loss(ThresholdDiscriminator(), z_old, torch.zeros_like(z_new)).item()
  assert abs(value - 2 * math.log(0.9)) < TOLERANCE, value
  print(f"✓ D(z_old) = 0.9, D(z_new) = 0.1 gives {value:.4f}")

  value = feature_adv_loss(half, z_new).item()
  assert abs(value - math.log(2)) < TOLERANCE
  value = feature_adv_loss(ConstantDiscriminator(1.0), z_new).item()
  assert 0.0 <= value < 1e-6
  print("✓ Feature loss: ln 2 at D = 0.5, 0 at D = 1")

  try:
    discriminator_loss(half, z_old, torch.rand(6, 3, 3, dtype=torch.float64))
    assert False, "dimension mismatch should raise"
  except ValidationError:
    pass
  try:
    feature_adv_loss(half, torch.zeros(0, 16, dtype=torch.float64))
    assert False, "empty batch should raise"
  except ValidationError:
    pass
  print("✓ Dimension mismatch and empty batches rejected")


def test_gradient_isolation():
  """Each loss produces gradients only on its own side of the game."""
  print("\n=== Gradient Isolation Test ===")

  model = build_backbone([{"type": "conv", "out_channels": 4, "pool": 2}, {"type": "fc", "units": 8}], [2],
                         in_channels=3, image_size=8).double()
  model.eval()
  images = torch.randn(4, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
  d = Discriminator(16, hidden_units=16).double()

  z_new = attention_features(forward_capture(model, images, [0]).conv_activation)
  z_old = torch.rand(4, 16, dtype=torch.float64)
  discriminator_loss(d, z_old, z_new).backward()
  assert all(p.grad is None for p in model.parameters())
  assert any(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in d.parameters())
  print("✓ discriminator_loss reaches D only")

  d.zero_grad(set_to_none=True)
  z_new = attention_features(forward_capture(model, images, [0]).conv_activation)
  feature_adv_loss(d, z_new).backward()
  assert all(p.grad is None for p in d.parameters())
  conv_weight = model.feature_extractor.conv1[0].weight
  assert conv_weight.grad is not None and bool(conv_weight.grad.abs().sum() > 0)
  print("✓ feature_adv_loss reaches the feature extractor only")


def test_adv_step():
  """One ascent step on D, then the feature loss against the updated D."""
  print("\n=== Adversarial Step Test ===")

  torch.manual_seed(0)
  d = Discriminator(16, hidden_units=16).double()
  optimizer = make_optimizer(d, lr=1e-3)
  z_old = torch.rand(8, 16, dtype=torch.float64)
  z_new = (torch.rand(8, 16, dtype=torch.float64) * 0.2).requires_grad_(True)

  before = discriminator_loss(d, z_old, z_new).item()
  pair = adv_step(d, optimizer, z_old, z_new)
  after = discriminator_loss(d, z_old, z_new).item()
  assert abs(pair.d_loss - before) < 1e-12
  assert after >= before - 1e-12, (before, after)
  assert pair.d_loss <= 0.0
  print("✓ d_loss reported before the step; the objective does not decrease")

  assert torch.isfinite(pair.f_loss)
  assert abs(pair.f_loss.item() - feature_adv_loss(d, z_new).item()) < 1e-12
  pair.f_loss.backward()
  assert z_new.grad is not None
  print("✓ f_loss evaluated against the updated D and differentiable w.r.t. z_new")


ARCH = [
    {"type": "conv", "out_channels": 4, "kernel_size": 3},
    {"type": "conv", "out_channels": 6, "kernel_size": 3, "pool": 2},
    {"type": "fc", "units": 8},
]


def _images(count: int, seed: int) -> torch.Tensor:
  return torch.rand(count, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def _train_bank(live, frozen, steps: int = 200) -> DiscriminatorBank:
  """Adversarial D steps on maps from the live model and the snapshot, fresh images each step."""
  bank = DiscriminatorBank(live.attention_tap_sizes(), seed=0, task_id=1, hidden_units=16, lr=0.05,
                           dtype=torch.float64)
  live.eval()
  for step in range(steps):
    images = _images(16, 100 + step)
    z_old = with_attention(frozen.forward_capture(images)).attention_taps
    with torch.no_grad():
      z_new = with_attention(forward_capture(live, images, [0])).attention_taps
    bank.step(z_old, z_new)
  return bank


def _held_out_accuracy(bank: DiscriminatorBank, live, frozen) -> float:
  images = _images(128, 7)
  z_old = with_attention(frozen.forward_capture(images)).attention_taps
  with torch.no_grad():
    z_new = with_attention(forward_capture(live, images, [0])).attention_taps
  return bank.accuracy(z_old, z_new)


def test_with_attention():
  """Captured bundles carry one normalized map per tap plus the primary map."""
  print("\n=== Bundle Attention Test ===")

  model = build_backbone(ARCH, [2], image_size=8, seed=0, attention_layers=["conv2", "conv1"]).double()
  model.eval()
  images = _images(3, 0)
  bundle = forward_capture(model, images, [0])
  assert bundle.attention_map is None and not bundle.attention_taps
  assert with_attention(bundle) is bundle
  assert list(bundle.attention_taps) == ["conv1", "conv2"]
  for tap, activation in bundle.conv_taps.items():
    assert torch.equal(bundle.attention_taps[tap], attention_features(activation))
  assert bundle.attention_taps["conv1"].shape == (3, 64)
  assert bundle.attention_taps["conv2"].shape == (3, 16)
  assert bundle.primary_tap == "conv2"
  assert torch.equal(bundle.attention_map, attention_features(bundle.conv_activation))
  assert torch.allclose(bundle.attention_map.pow(2).sum(dim=1), torch.ones(3, dtype=torch.float64))
  print("✓ attention_taps and attention_map filled; the map belongs to the deepest tap")

  frozen = snapshot(model)
  frozen_bundle = with_attention(frozen.forward_capture(images))
  assert torch.allclose(frozen_bundle.attention_map, bundle.attention_map)
  print("✓ Snapshot bundles map the same way")

  bare = forward_capture(model, images, [0])
  bare.conv_taps = {}
  try:
    with_attention(bare)
    assert False, "bundle without conv taps should raise"
  except ValidationError:
    pass
  print("✓ Bundles without conv taps are rejected")


def test_chance_level():
  """D trained on a snapshot against its own copy stays at chance; a changed model is told apart."""
  print("\n=== Chance Level Test ===")

  base = build_backbone(ARCH, [2], image_size=8, seed=0).double()
  frozen = snapshot(base)
  live = copy.deepcopy(base)
  bank = _train_bank(live, frozen)
  accuracy = _held_out_accuracy(bank, live, frozen)
  assert 0.4 <= accuracy <= 0.6, accuracy
  print(f"✓ Snapshot copy, augmentation off, 200 D steps: held-out accuracy {accuracy:.3f}")

  # silenced deepest conv: empty live maps
  shifted = copy.deepcopy(base)
  with torch.no_grad():
    shifted.feature_extractor.conv2[0].weight.zero_()
    shifted.feature_extractor.conv2[0].bias.zero_()
  control = _train_bank(shifted, frozen)
  separated = _held_out_accuracy(control, shifted, frozen)
  assert separated > 0.6, separated
  print(f"✓ Same D budget against a changed model: held-out accuracy {separated:.3f}")


def test_discriminator_bank():
  """Per-tap discriminators, deterministic initialization and state handling."""
  print("\n=== Discriminator Bank Test ===")

  taps = {"conv2": 16, "conv3": 4}
  bank = DiscriminatorBank(taps, seed=0, task_id=1, hidden_units=8)
  twin = DiscriminatorBank(taps, seed=0, task_id=1, hidden_units=8)
  other = DiscriminatorBank(taps, seed=0, task_id=2, hidden_units=8)
  for tap in taps:
    assert torch.equal(bank.discriminators[tap].layers[0].weight, twin.discriminators[tap].layers[0].weight)
    assert not torch.equal(bank.discriminators[tap].layers[0].weight, other.discriminators[tap].layers[0].weight)
  print("✓ Initialization derived from (seed, task, tap)")

  z_old = {"conv2": torch.rand(4, 16), "conv3": torch.rand(4, 4)}
  z_new = {"conv2": torch.rand(4, 16, requires_grad=True), "conv3": torch.rand(4, 4, requires_grad=True)}
  pair = bank.step(z_old, z_new)
  assert pair.f_loss.dim() == 0
  expected = sum(feature_adv_loss(d, z_new[tap]) for tap, d in bank.discriminators.items())
  assert abs(pair.f_loss.item() - expected.item()) < 1e-6
  assert abs(bank.feature_loss(z_new).item() - expected.item()) < 1e-6
  assert 0.0 <= bank.accuracy(z_old, z_new) <= 1.0
  print("✓ Losses summed over taps")

  state = bank.state_dict()
  twin.load_state_dict(state)
  for tap in taps:
    assert torch.equal(bank.discriminators[tap].layers[0].weight, twin.discriminators[tap].layers[0].weight)
  try:
    other.load_state_dict(state)
    assert False, "state of another task should be rejected"
  except ValidationError:
    pass
  try:
    DiscriminatorBank({}, seed=0, task_id=1)
    assert False, "empty tap set should raise"
  except ValidationError:
    pass
  print("✓ State round-trips within a task and is rejected across tasks")


def main():
  """Run all tests."""
  print("Attention Align Test Suite")
  print("=" * 60)

  try:
    test_attention_map()
    test_normalize_attention()
    test_discriminator()
    test_losses()
    test_gradient_isolation()
    test_adv_step()
    test_with_attention()
    test_chance_level()
    test_discriminator_bank()

    print("\n" + "=" * 60)
    print("🎉 All attention align tests completed successfully!")

  except Exception as e:  # pylint: disable=broad-exception-caught
    print(f"\n❌ Test failed: {str(e)}")
    traceback.print_exc()
    sys.exit(1)


if __name__ == "__main__":
  main()
