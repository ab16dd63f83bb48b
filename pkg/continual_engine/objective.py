"""
Classification loss and the combined multilevel objective

    L = L_cls + lambda1 * L_dist + lambda2 * L_conv + lambda3 * L_fc

L_dist sums the logit distillation loss over all old heads, L_conv is the adversarial
feature loss on normalized attention maps (or its L2 ablation on raw conv activations)
and L_fc is the MMD (or L2) between live and snapshot semantic features. Terms whose
weight is zero, or whose variant is off, are not computed at all.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import torch
from torch import Tensor
from torch.nn import functional as F

from attention_align.attention import with_attention
from attention_align.discriminator import DiscriminatorBank
from common.errors import ConfigurationError, ValidationError
from model_core.backbone import ModelDecomposition, forward_capture
from model_core.snapshot import FrozenSnapshot
from semantic_align.distillation import DEFAULT_TEMPERATURE, kd_loss, l2_feature_loss, l2_logit_loss
from semantic_align.kernels import KernelSpec, mmd_loss
from semantic_align.soft_targets import SoftTargetStore
from .methods import ConvVariant, FcVariant, LogitVariant, LossWeights

logger = logging.getLogger(__name__)


def _check_labels(labels: Tensor, class_count: int) -> None:
  if labels.numel() == 0:
    raise ValidationError("Empty label batch")
  if int(labels.min()) < 0 or int(labels.max()) >= class_count:
    raise ValidationError(f"Labels must lie in [0, {class_count}), got range "
                          f"[{int(labels.min())}, {int(labels.max())}]")


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
  """Mean softmax cross-entropy with label range validation."""
  _check_labels(labels, logits.shape[-1])
  return F.cross_entropy(logits, labels)


def classification_loss(model: ModelDecomposition, images: Tensor, labels: Tensor, head: int) -> Tensor:
  """
  Mean softmax cross-entropy of the given head on a labelled batch.

  Raises:
      ValidationError: A label outside [0, class_count)
      UnknownHeadError: Head does not exist
  """
  model.check_head(head)
  _check_labels(labels, model.head_class_counts[head])
  return F.cross_entropy(model(images, head), labels)


@dataclass
class LossBreakdown:
  """Combined loss and its unweighted components (as plain floats for logging)."""
  total: Tensor
  cls: float
  dist: float = 0.0
  conv: float = 0.0
  fc: float = 0.0
  d_loss: Optional[float] = None

  def components(self) -> Dict[str, Any]:
    data = {"total": float(self.total.detach()), "cls": self.cls, "dist": self.dist, "conv": self.conv, "fc": self.fc}
    if self.d_loss is not None:
      data["d_loss"] = self.d_loss
    return data

  def is_finite(self) -> bool:
    return bool(torch.isfinite(self.total.detach()).all())


def weighted_total(cls: Tensor, dist: Tensor, conv: Tensor, fc: Tensor, weights: LossWeights) -> Tensor:
  """cls + lambda1 * dist + lambda2 * conv + lambda3 * fc."""
  return cls + weights.lambda1 * dist + weights.lambda2 * conv + weights.lambda3 * fc


def _unpack(batch: Sequence[Tensor]):
  if len(batch) == 3:
    return batch[0], batch[1], batch[2]
  if len(batch) == 2:
    return batch[0], batch[1], None
  raise ValidationError("A batch is (images, labels) or (images, labels, sample_ids)")


def combined_loss(model: ModelDecomposition,
                  snapshot: Optional[FrozenSnapshot],
                  discriminators: Optional[DiscriminatorBank],
                  batch: Sequence[Tensor],
                  weights: LossWeights,
                  new_head: int,
                  kernel_spec: Optional[KernelSpec] = None,
                  temperature: float = DEFAULT_TEMPERATURE,
                  soft_targets: Optional[SoftTargetStore] = None,
                  adversarial_step: bool = True) -> LossBreakdown:
  """
  Evaluate the combined objective on one batch.

  Snapshot targets are computed on the same (possibly augmented) view as the live model.
  Recorded soft targets are used instead when a store is given and the batch carries
  sample ids; the L2 conv ablation always recomputes snapshot activations.

  Args:
      model: Live model
      snapshot: Frozen pre-task model; required when any auxiliary term is active
      discriminators: Discriminator bank; required for the adversarial conv variant
      batch: (images, labels[, sample_ids]) with task-local labels for new_head
      weights: Loss weights and variants
      new_head: Head id of the task being trained
      kernel_spec: MMD widths; None selects the per-batch median heuristic
      temperature: KD temperature
      soft_targets: Recorded targets for un-augmented training
      adversarial_step: Run the interleaved discriminator step (off for pure evaluation)

  Returns:
      LossBreakdown: Differentiable total and float components

  Raises:
      ConfigurationError: Missing snapshot or discriminator for an active term
      ValidationError: Bad labels
  """
  images, labels, sample_ids = _unpack(batch)
  if not weights.any_auxiliary:
    loss = classification_loss(model, images, labels, new_head)
    return LossBreakdown(total=loss, cls=float(loss.detach()))
  if snapshot is None:
    raise ConfigurationError("A snapshot is required when any auxiliary loss weight is non-zero")
  if weights.uses_adversarial and discriminators is None:
    raise ConfigurationError("The adversarial conv variant needs a discriminator bank")

  old_heads = [head for head in snapshot.head_ids if head != new_head]
  live = forward_capture(model, images, old_heads + [new_head])
  cls = cross_entropy(live.logits_per_head[new_head], labels)

  use_store = (soft_targets is not None and sample_ids is not None
               and not (weights.uses_conv and weights.conv_variant is ConvVariant.L2))
  if use_store:
    ref_logits, ref_semantic, ref_maps = soft_targets.get_batch(new_head, sample_ids.tolist())
    ref, ref_conv = None, None
  else:
    ref = snapshot.forward_capture(images, old_heads)
    ref_logits, ref_semantic, ref_conv = ref.logits_per_head, ref.semantic_feature, ref.conv_taps
    ref_maps = None

  zero = cls.new_zeros(())
  dist, conv, fc = zero, zero, zero
  d_loss = None

  if weights.uses_distillation and old_heads:
    if weights.logit_variant is LogitVariant.KD:
      terms = [kd_loss(live.logits_per_head[h], ref_logits[h], temperature) for h in old_heads]
    else:
      terms = [l2_logit_loss(live.logits_per_head[h], ref_logits[h]) for h in old_heads]
    dist = torch.stack(terms).sum()

  if weights.uses_conv:
    if weights.conv_variant is ConvVariant.ADVERSARIAL:
      z_new = with_attention(live).attention_taps
      if ref_maps is None:
        ref_maps = with_attention(ref).attention_taps
      if adversarial_step:
        pair = discriminators.step(ref_maps, z_new)
        conv, d_loss = pair.f_loss, pair.d_loss
      else:
        conv = discriminators.feature_loss(z_new)
    else:
      conv = torch.stack([l2_feature_loss(live.conv_taps[tap], ref_conv[tap]) for tap in live.conv_taps]).sum()

  if weights.uses_fc:
    if weights.fc_variant is FcVariant.MMD:
      fc = mmd_loss(live.semantic_feature, ref_semantic, kernel_spec)
    else:
      fc = l2_feature_loss(live.semantic_feature, ref_semantic)

  total = weighted_total(cls, dist, conv, fc, weights)
  return LossBreakdown(total=total, cls=float(cls.detach()), dist=float(dist.detach()),
                       conv=float(conv.detach()), fc=float(fc.detach()), d_loss=d_loss)
