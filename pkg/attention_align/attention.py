"""
Activation-based attention maps.

The attention map of a conv activation A (C x H x W) is the per-pixel sum over channels
of |A_c|^2. Maps are L2-normalized per sample before they reach the discriminator so it
cannot tell old from new features by magnitude alone.
"""

import torch
from torch import Tensor

from common.errors import ValidationError
from model_core.backbone import ActivationBundle


def attention_map(conv_activation: Tensor) -> Tensor:
  """
  Sum of squared magnitudes over the channel axis.

  Args:
      conv_activation: (C, H, W) for one sample or (N, C, H, W) for a batch

  Returns:
      Tensor: (H, W) or (N, H, W), element-wise non-negative, differentiable

  Raises:
      ValidationError: Empty tensor, no channels, or wrong rank
  """
  if conv_activation.dim() not in (3, 4):
    raise ValidationError(f"Expected a (C,H,W) or (N,C,H,W) activation, got shape {tuple(conv_activation.shape)}")
  if conv_activation.numel() == 0:
    raise ValidationError("Activation tensor is empty")
  return conv_activation.abs().pow(2).sum(dim=-3)


def normalize_attention(att_map: Tensor) -> Tensor:
  """
  Divide each (flattened) map by its L2 norm. Zero maps pass through unchanged.

  Accepts (H, W) or (N, H, W); the output has the input's shape.
  """
  if att_map.dim() == 2:
    return normalize_attention(att_map.unsqueeze(0)).squeeze(0)
  flat = att_map.reshape(att_map.shape[0], -1)
  norms = flat.norm(p=2, dim=1, keepdim=True)
  safe = torch.where(norms > 0, norms, torch.ones_like(norms))
  return (flat / safe).reshape(att_map.shape)


def flatten_attention(att_map: Tensor) -> Tensor:
  """(N, H, W) -> (N, H*W), the layout the discriminator consumes."""
  return att_map.reshape(att_map.shape[0], -1)


def attention_features(conv_activation: Tensor) -> Tensor:
  """normalize_attention(attention_map(A)) flattened per sample."""
  return flatten_attention(normalize_attention(attention_map(conv_activation)))


def with_attention(bundle: ActivationBundle) -> ActivationBundle:
  """
  Fill attention_taps (one flattened, normalized map per conv tap) and attention_map
  (the primary tap's map) on a captured bundle. Returns the same bundle.

  Raises:
      ValidationError: The bundle has no conv taps
  """
  if not bundle.conv_taps:
    raise ValidationError("Activation bundle has no conv taps to map")
  bundle.attention_taps = {tap: attention_features(activation) for tap, activation in bundle.conv_taps.items()}
  primary = bundle.primary_tap or next(reversed(bundle.attention_taps))
  bundle.attention_map = bundle.attention_taps[primary]
  return bundle
