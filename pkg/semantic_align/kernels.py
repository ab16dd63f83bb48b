"""
Multi-width RBF kernels and the squared-MMD estimate between two feature batches.

The estimate is the full-Gram V-statistic

    mean k(new, new) + mean k(old, old) - 2 mean k(new, old)

which is non-negative for a PSD kernel and exactly zero for identical batches. The old
batch is a constant; gradients flow only into the new batch.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import Tensor

from common.errors import ValidationError

logger = logging.getLogger(__name__)

# Multipliers applied to the median-heuristic width
DEFAULT_WIDTH_MULTIPLIERS: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelSpec:
  """RBF widths sigma_1..sigma_m; the kernel is the arithmetic mean over widths."""
  bandwidths: Tuple[float, ...]

  def __post_init__(self):
    widths = tuple(float(b) for b in self.bandwidths)
    if not widths:
      raise ValidationError("KernelSpec needs at least one bandwidth")
    if any(not b > 0 for b in widths):
      raise ValidationError(f"Bandwidths must be positive, got {widths}")
    object.__setattr__(self, "bandwidths", widths)


def _as_matrix(batch: Tensor, name: str) -> Tensor:
  if batch.dim() == 0 or batch.shape[0] == 0 or batch.numel() == 0:
    raise ValidationError(f"{name} batch is empty")
  return batch.reshape(batch.shape[0], -1)


def squared_distances(x: Tensor, y: Tensor) -> Tensor:
  """Pairwise squared Euclidean distances (N, M); exact zeros on equal rows."""
  return (x.unsqueeze(1) - y.unsqueeze(0)).pow(2).sum(-1)


def gram_matrix(x: Tensor, y: Tensor, spec: KernelSpec) -> Tensor:
  """Kernel values k(x_i, y_j) for 2-D batches x (N, d) and y (M, d)."""
  distances = squared_distances(x, y)
  kernels = [torch.exp(-distances / (2.0 * width * width)) for width in spec.bandwidths]
  return torch.stack(kernels).mean(0)


def rbf_kernel(p: Tensor, q: Tensor, spec: KernelSpec) -> Tensor:
  """
  Multi-width RBF kernel between two vectors: mean over widths of exp(-|p-q|^2 / (2 sigma^2)).

  Raises:
      ValidationError: Dimension mismatch
  """
  if p.shape != q.shape:
    raise ValidationError(f"Kernel arguments differ in shape: {tuple(p.shape)} vs {tuple(q.shape)}")
  return gram_matrix(p.reshape(1, -1), q.reshape(1, -1), spec)[0, 0]


def median_bandwidths(a: Tensor,
                      b: Tensor,
                      multipliers: Sequence[float] = DEFAULT_WIDTH_MULTIPLIERS) -> KernelSpec:
  """
  Median-heuristic widths for the joined batch.

  sigma_med^2 is the median off-diagonal pairwise squared distance of cat(a, b); the widths are
  sigma_med times each multiplier. Computed without gradients. Falls back to sigma_med = 1
  when every sample coincides.
  """
  joined = torch.cat([_as_matrix(a, "First"), _as_matrix(b, "Second")]).detach()
  n = joined.shape[0]
  if n < 2:
    sigma = 1.0
  else:
    distances = squared_distances(joined, joined)
    mask = ~torch.eye(n, dtype=torch.bool, device=joined.device)
    median = float(distances[mask].median())
    sigma = median ** 0.5 if median > 0 else 1.0
  return KernelSpec(tuple(sigma * m for m in multipliers))


def mmd_loss(h_new: Tensor, h_old: Tensor, spec: Optional[KernelSpec] = None) -> Tensor:
  """
  Squared MMD V-statistic between live and snapshot features.

  Args:
      h_new: Live features (N, ...), differentiable
      h_old: Snapshot features (M, ...), treated as constant
      spec: Kernel widths; None selects median_bandwidths on the joined batch

  Returns:
      Tensor: Scalar >= 0

  Raises:
      ValidationError: Empty batch or feature dimension mismatch
  """
  x = _as_matrix(h_new, "New feature")
  y = _as_matrix(h_old, "Old feature").detach()
  if x.shape[1] != y.shape[1]:
    raise ValidationError(f"Feature dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
  spec = spec or median_bandwidths(x, y)
  value = gram_matrix(x, x, spec).mean() + gram_matrix(y, y, spec).mean() - 2.0 * gram_matrix(x, y, spec).mean()
  return value.clamp_min(0.0)
