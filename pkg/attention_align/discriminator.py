"""
Attention-map discriminator and the adversarial alignment losses.

Old-model maps are labelled real (target 1) and new-model maps fake (target 0). The
discriminator ascends

    mean log D(z_old) + mean log(1 - D(z_new))

while the live feature extractor descends the inverted-label loss -mean log D(z_new).
Each loss only ever produces gradients on its own side of the game.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional

import torch
from torch import Tensor, nn
from torch.func import functional_call

from common.errors import ValidationError
from common.seeding import derive_seed

logger = logging.getLogger(__name__)

# Output clamp keeping both log terms finite
EPSILON = 1e-7
DEFAULT_HIDDEN_UNITS = 500


class Discriminator(nn.Module):
  """
  Three-layer perceptron: flattened map (H*W) -> hidden ReLU layer -> scalar in (0, 1).

  Args:
      in_features: Flattened attention-map size H*W
      hidden_units: Width of the hidden layer
  """

  def __init__(self, in_features: int, hidden_units: int = DEFAULT_HIDDEN_UNITS):
    super().__init__()
    if in_features <= 0 or hidden_units <= 0:
      raise ValidationError("Discriminator sizes must be positive")
    self.in_features = int(in_features)
    self.layers = nn.Sequential(
        nn.Linear(self.in_features, int(hidden_units)),
        nn.ReLU(),
        nn.Linear(int(hidden_units), 1),
        nn.Sigmoid()
    )

  def forward(self, z: Tensor) -> Tensor:
    return self.layers(z.reshape(z.shape[0], -1)).squeeze(-1).clamp(EPSILON, 1.0 - EPSILON)


def _probabilities(d: nn.Module, z: Tensor) -> Tensor:
  return d(z).reshape(-1).clamp(EPSILON, 1.0 - EPSILON)


def _check_batch(z: Tensor, name: str) -> None:
  if z.dim() < 1 or z.shape[0] == 0 or z.numel() == 0:
    raise ValidationError(f"{name} batch is empty")


def discriminator_loss(d: nn.Module, z_old: Tensor, z_new: Tensor) -> Tensor:
  """
  Value of the discriminator objective at the current D.

  Both batches are detached, so backpropagating this value reaches D's parameters only.

  Raises:
      ValidationError: Empty batch or flattened dimension mismatch
  """
  _check_batch(z_old, "Old-model map")
  _check_batch(z_new, "New-model map")
  old_dim = z_old.reshape(z_old.shape[0], -1).shape[1]
  new_dim = z_new.reshape(z_new.shape[0], -1).shape[1]
  if old_dim != new_dim:
    raise ValidationError(f"Map dimension mismatch: old {old_dim} vs new {new_dim}")

  real = _probabilities(d, z_old.detach())
  fake = _probabilities(d, z_new.detach())
  return torch.log(real).mean() + torch.log1p(-fake).mean()


def feature_adv_loss(d: nn.Module, z_new: Tensor) -> Tensor:
  """
  Inverted-label loss -mean log D(z_new) for the feature extractor.

  D is evaluated with detached copies of its parameters and buffers, so gradients reach
  z_new (and through it the backbone) but never D.

  Raises:
      ValidationError: Empty batch
  """
  _check_batch(z_new, "New-model map")
  frozen = {name: tensor.detach() for name, tensor in d.state_dict(keep_vars=True).items()}
  probabilities = functional_call(d, frozen, (z_new,)).reshape(-1).clamp(EPSILON, 1.0 - EPSILON)
  return -torch.log(probabilities).mean()


@dataclass
class AdvLossPair:
  """d_loss: discriminator objective before the D step; f_loss: feature loss against the updated D."""
  d_loss: float
  f_loss: Tensor

  def __post_init__(self):
    if not torch.isfinite(torch.as_tensor(self.d_loss)):
      logger.warning("Non-finite discriminator objective %s", self.d_loss)


def make_optimizer(d: nn.Module, lr: float, momentum: float = 0.9) -> torch.optim.Optimizer:
  """SGD with momentum over D's parameters only."""
  return torch.optim.SGD(d.parameters(), lr=lr, momentum=momentum)


def adv_step(d: nn.Module, optimizer: torch.optim.Optimizer, z_old: Tensor, z_new: Tensor) -> AdvLossPair:
  """
  One interleaved round of the minimax game.

  Runs one ascent step on the discriminator objective (descent on its negation), then
  evaluates the inverted-label loss for the backbone against the updated D.

  Args:
      d: Discriminator
      optimizer: Optimizer over D's parameters only
      z_old: Normalized snapshot maps (constants)
      z_new: Normalized live maps (keep their graph for the backbone's loss)

  Returns:
      AdvLossPair: d_loss before the D step, differentiable f_loss
  """
  d.train()
  optimizer.zero_grad(set_to_none=True)
  d_objective = discriminator_loss(d, z_old, z_new)
  (-d_objective).backward()
  optimizer.step()
  return AdvLossPair(d_loss=float(d_objective.detach()), f_loss=feature_adv_loss(d, z_new))


def discriminator_accuracy(d: nn.Module, z_old: Tensor, z_new: Tensor) -> float:
  """Fraction of maps classified correctly at threshold 0.5 (old -> real, new -> fake)."""
  _check_batch(z_old, "Old-model map")
  _check_batch(z_new, "New-model map")
  with torch.no_grad():
    real = _probabilities(d, z_old) >= 0.5
    fake = _probabilities(d, z_new) < 0.5
  return float((real.sum() + fake.sum()).item()) / float(real.numel() + fake.numel())


class DiscriminatorBank:
  """
  One discriminator and optimizer per attention tap, created fresh for a single task.

  Args:
      tap_features: Flattened map size per tap name
      seed: Run seed
      task_id: Task the bank belongs to; initialization draws from (seed, task_id, tap)
      hidden_units: Hidden layer width
      lr: D learning rate
      momentum: D momentum
      dtype: Parameter dtype, matching the backbone
  """

  def __init__(self,
               tap_features: Mapping[str, int],
               seed: int,
               task_id: int,
               hidden_units: int = DEFAULT_HIDDEN_UNITS,
               lr: float = 0.01,
               momentum: float = 0.9,
               dtype: torch.dtype = torch.float32):
    if not tap_features:
      raise ValidationError("DiscriminatorBank needs at least one attention tap")
    self.task_id = task_id
    self.discriminators: Dict[str, Discriminator] = {}
    self.optimizers: Dict[str, torch.optim.Optimizer] = {}
    for tap, features in tap_features.items():
      with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "discriminator", task_id, tap))
        d = Discriminator(features, hidden_units).to(dtype=dtype)
      self.discriminators[tap] = d
      self.optimizers[tap] = make_optimizer(d, lr, momentum)
    logger.info("Initialized %d discriminator(s) for task %d: %s", len(self.discriminators), task_id,
                {tap: d.in_features for tap, d in self.discriminators.items()})

  @property
  def taps(self) -> Iterable[str]:
    return self.discriminators.keys()

  def step(self, z_old: Mapping[str, Tensor], z_new: Mapping[str, Tensor]) -> AdvLossPair:
    """adv_step on every tap; the losses are summed over taps."""
    d_total = 0.0
    f_total: Optional[Tensor] = None
    for tap, d in self.discriminators.items():
      pair = adv_step(d, self.optimizers[tap], z_old[tap], z_new[tap])
      d_total += pair.d_loss
      f_total = pair.f_loss if f_total is None else f_total + pair.f_loss
    return AdvLossPair(d_loss=d_total, f_loss=f_total)

  def feature_loss(self, z_new: Mapping[str, Tensor]) -> Tensor:
    """Inverted-label loss summed over taps, without touching D."""
    losses = [feature_adv_loss(d, z_new[tap]) for tap, d in self.discriminators.items()]
    return torch.stack(losses).sum()

  def accuracy(self, z_old: Mapping[str, Tensor], z_new: Mapping[str, Tensor]) -> float:
    """Mean real/fake accuracy over taps."""
    values = [discriminator_accuracy(d, z_old[tap], z_new[tap]) for tap, d in self.discriminators.items()]
    return sum(values) / len(values)

  def parameters(self):
    for d in self.discriminators.values():
      yield from d.parameters()

  def state_dict(self) -> Dict[str, Dict]:
    return {
        "task_id": self.task_id,
        "discriminators": {tap: d.state_dict() for tap, d in self.discriminators.items()},
        "optimizers": {tap: opt.state_dict() for tap, opt in self.optimizers.items()},
    }

  def load_state_dict(self, state: Mapping) -> None:
    if state.get("task_id") != self.task_id:
      raise ValidationError(f"Discriminator state belongs to task {state.get('task_id')}, not {self.task_id}")
    for tap, d in self.discriminators.items():
      d.load_state_dict(state["discriminators"][tap])
      self.optimizers[tap].load_state_dict(state["optimizers"][tap])
