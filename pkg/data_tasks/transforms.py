"""
Train-time augmentation, per-task normalization and the deterministic test-time view.

Augmentation is random resized cropping followed by a horizontal flip with p = 0.5. Colour
is never jittered. All randomness comes from the generator passed in, so an image's
augmented view is fixed by its (seed, task, epoch, sample) stream.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import torch
from torch import Tensor
from torchvision.transforms.v2 import functional as TF

from common.errors import ValidationError

CROP_SCALE = (0.5, 1.0)
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
FLIP_PROBABILITY = 0.5


@dataclass(frozen=True)
class NormalizationStats:
  """Per-channel mean and (population) standard deviation of a training split."""
  mean: Tuple[float, ...]
  std: Tuple[float, ...]

  def __post_init__(self):
    if len(self.mean) != len(self.std):
      raise ValidationError("mean and std must have one entry per channel")

  def to_dict(self):
    return {"mean": list(self.mean), "std": list(self.std)}


def compute_stats(images: Tensor) -> NormalizationStats:
  """Per-channel statistics over an (N, C, H, W) batch."""
  if images.dim() != 4 or images.shape[0] == 0:
    raise ValidationError(f"Expected a non-empty (N,C,H,W) batch, got {tuple(images.shape)}")
  per_channel = images.transpose(0, 1).reshape(images.shape[1], -1).to(torch.float64)
  return NormalizationStats(
      mean=tuple(per_channel.mean(dim=1).tolist()),
      std=tuple(per_channel.std(dim=1, unbiased=False).tolist())
  )


def normalize(image: Tensor, stats: NormalizationStats) -> Tensor:
  """
  (x - mean) / std per channel for (C, H, W) or (N, C, H, W) input.

  Raises:
      ValidationError: A channel has std <= 0 or the channel count does not match
  """
  if any(not s > 0 for s in stats.std):
    raise ValidationError(f"Normalization std must be positive per channel, got {stats.std}")
  channels = image.shape[-3]
  if channels != len(stats.mean):
    raise ValidationError(f"Image has {channels} channels, stats have {len(stats.mean)}")
  mean = torch.tensor(stats.mean, dtype=image.dtype, device=image.device).reshape(-1, 1, 1)
  std = torch.tensor(stats.std, dtype=image.dtype, device=image.device).reshape(-1, 1, 1)
  return (image - mean) / std


def sample_crop(height: int,
                width: int,
                generator: torch.Generator,
                scale: Tuple[float, float] = CROP_SCALE,
                ratio: Tuple[float, float] = CROP_RATIO) -> Tuple[int, int, int, int]:
  """
  Random resized crop box (top, left, h, w), drawn from generator.

  Ten attempts at a box with the sampled area fraction and aspect ratio; falls back to the
  full image.
  """
  area = height * width
  log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
  for _ in range(10):
    target_area = area * (scale[0] + (scale[1] - scale[0]) * float(torch.rand(1, generator=generator)))
    aspect = math.exp(log_ratio[0] + (log_ratio[1] - log_ratio[0]) * float(torch.rand(1, generator=generator)))
    w = int(round(math.sqrt(target_area * aspect)))
    h = int(round(math.sqrt(target_area / aspect)))
    if 0 < w <= width and 0 < h <= height:
      top = int(torch.randint(0, height - h + 1, (1,), generator=generator))
      left = int(torch.randint(0, width - w + 1, (1,), generator=generator))
      return top, left, h, w
  return 0, 0, height, width


def augment(image: Tensor, generator: torch.Generator) -> Tensor:
  """
  Random resized crop back to the input size, then horizontal flip with p = 0.5.

  Args:
      image: (C, H, W) float image
      generator: Stream for this image; the same stream position gives the same output

  Returns:
      Tensor: Augmented image with the input's shape
  """
  height, width = image.shape[-2], image.shape[-1]
  top, left, h, w = sample_crop(height, width, generator)
  out = TF.resized_crop(image, top, left, h, w, [height, width], antialias=True)
  if float(torch.rand(1, generator=generator)) < FLIP_PROBABILITY:
    out = TF.horizontal_flip(out)
  return out


def center_crop(image: Tensor, fraction: float = 1.0) -> Tensor:
  """
  Deterministic test-time view: central crop covering `fraction` of each side, resized back.

  fraction = 1.0 returns the image unchanged.
  """
  if not 0 < fraction <= 1.0:
    raise ValidationError(f"Center crop fraction must be in (0, 1], got {fraction}")
  if fraction == 1.0:
    return image
  height, width = image.shape[-2], image.shape[-1]
  cropped = TF.center_crop(image, [max(1, int(round(height * fraction))), max(1, int(round(width * fraction)))])
  return TF.resize(cropped, [height, width], antialias=True)
