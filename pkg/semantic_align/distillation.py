"""Logit- and feature-level distillation losses against recorded snapshot responses."""

from torch import Tensor
from torch.nn import functional as F

from common.errors import ValidationError

DEFAULT_TEMPERATURE = 2.0


def _pair(new: Tensor, recorded: Tensor) -> tuple:
  if new.shape != recorded.shape:
    raise ValidationError(f"Shape mismatch: {tuple(new.shape)} vs recorded {tuple(recorded.shape)}")
  if new.numel() == 0:
    raise ValidationError("Empty batch")
  if new.dim() == 1:
    return new.unsqueeze(0), recorded.unsqueeze(0)
  return new, recorded


def kd_loss(new_logits: Tensor, recorded_logits: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
  """
  Cross-entropy between softmax(recorded / T) and softmax(new / T), averaged over samples.

  No T^2 rescaling is applied. A 1-D input is treated as a single sample.

  Raises:
      ValidationError: Shape mismatch or non-positive temperature
  """
  if not temperature > 0:
    raise ValidationError(f"Temperature must be positive, got {temperature}")
  new, recorded = _pair(new_logits, recorded_logits)
  target = F.softmax(recorded.detach() / temperature, dim=-1)
  return -(target * F.log_softmax(new / temperature, dim=-1)).sum(-1).mean()


def l2_logit_loss(new_logits: Tensor, recorded_logits: Tensor) -> Tensor:
  """Mean squared difference over all entries."""
  new, recorded = _pair(new_logits, recorded_logits)
  return F.mse_loss(new, recorded.detach())


def l2_feature_loss(new_feat: Tensor, recorded_feat: Tensor) -> Tensor:
  """l2_logit_loss on per-sample flattened conv or fc features."""
  if new_feat.shape != recorded_feat.shape:
    raise ValidationError(f"Shape mismatch: {tuple(new_feat.shape)} vs recorded {tuple(recorded_feat.shape)}")
  if new_feat.dim() <= 1:
    return l2_logit_loss(new_feat, recorded_feat)
  return l2_logit_loss(new_feat.reshape(new_feat.shape[0], -1), recorded_feat.reshape(recorded_feat.shape[0], -1))
