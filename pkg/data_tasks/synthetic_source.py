"""
Synthetic image sources for download-free experiments.

Two generators produce visually related but separable classes:

- blobs: each class is a fixed arrangement of coloured Gaussian blobs; samples jitter the
  blob positions and amplitudes and add pixel noise
- stripes: each class is a sinusoidal grating with its own orientation, frequency and
  colour pair; samples vary the phase and add noise

The mixed source lists the blob classes followed by the stripe classes. Every class is
generated from its own seed-derived stream, so a class looks the same regardless of which
other classes are requested.
"""

import logging
import math
from typing import Any, Dict, List

import torch
from torch import Tensor

from common.errors import ValidationError
from common.seeding import make_generator
from .base_image_source import BaseImageSource

logger = logging.getLogger(__name__)

BLOBS = "blobs"
STRIPES = "stripes"
BLOBS_PER_CLASS = 3


def _uniform(generator: torch.Generator, low: float, high: float, *shape) -> Tensor:
  return low + (high - low) * torch.rand(*shape, generator=generator)


class SyntheticImageSource(BaseImageSource):
  """
  Procedurally generated classes.

  Args:
      kind: "blobs", "stripes" or "mixed"
      num_classes: Total number of classes (split evenly between kinds for "mixed")
      samples_per_class: Images per class
      image_size: Square side length
      channels: Image channel count
      noise: Standard deviation of the additive pixel noise
      seed: Generator seed; independent of the training seed
  """

  def __init__(self,
               kind: str = "mixed",
               num_classes: int = 10,
               samples_per_class: int = 200,
               image_size: int = 32,
               channels: int = 3,
               noise: float = 0.1,
               seed: int = 0):
    if kind not in (BLOBS, STRIPES, "mixed"):
      raise ValidationError(f"Unknown synthetic kind {kind!r}")
    if num_classes < 1 or samples_per_class < 1 or image_size < 4 or channels < 1:
      raise ValidationError("Synthetic source sizes must be positive (image_size >= 4)")
    if noise < 0:
      raise ValidationError("Noise must be non-negative")
    self.kind = kind
    self.num_classes = int(num_classes)
    self.samples_per_class = int(samples_per_class)
    self._image_size = int(image_size)
    self._channels = int(channels)
    self.noise = float(noise)
    self.seed = int(seed)

    if kind == "mixed":
      n_blobs = (self.num_classes + 1) // 2
      self._kinds = [BLOBS] * n_blobs + [STRIPES] * (self.num_classes - n_blobs)
    else:
      self._kinds = [kind] * self.num_classes

    ys, xs = torch.meshgrid(torch.linspace(0.0, 1.0, self._image_size),
                            torch.linspace(0.0, 1.0, self._image_size), indexing="ij")
    self._grid_y = ys
    self._grid_x = xs
    logger.debug("Synthetic source %s: %d classes x %d samples at %dpx",
                 kind, self.num_classes, self.samples_per_class, self._image_size)

  @property
  def source_type(self) -> str:
    return f"synthetic_{self.kind}"

  @property
  def num_channels(self) -> int:
    return self._channels

  @property
  def image_size(self) -> int:
    return self._image_size

  def class_names(self) -> List[str]:
    counters = {BLOBS: 0, STRIPES: 0}
    names = []
    for kind in self._kinds:
      names.append(f"{kind}_{counters[kind]:02d}")
      counters[kind] += 1
    return names

  def load_class(self, class_index: int) -> Tensor:
    if not 0 <= class_index < self.num_classes:
      raise ValidationError(f"Class index {class_index} out of range [0, {self.num_classes})")
    kind = self._kinds[class_index]
    name = self.class_names()[class_index]
    prototype = make_generator(self.seed, "prototype", name)
    samples = make_generator(self.seed, "samples", name)
    if kind == BLOBS:
      images = self._blobs(prototype, samples)
    else:
      images = self._stripes(prototype, samples, class_index - self._kinds.index(STRIPES))
    if self.noise > 0:
      images = images + self.noise * torch.randn(images.shape, generator=samples)
    return images.clamp(0.0, 1.0)

  def _blobs(self, prototype: torch.Generator, samples: torch.Generator) -> Tensor:
    n, c = self.samples_per_class, self._channels
    centers = _uniform(prototype, 0.15, 0.85, BLOBS_PER_CLASS, 2)
    widths = _uniform(prototype, 0.08, 0.18, BLOBS_PER_CLASS)
    colors = _uniform(prototype, 0.2, 1.0, BLOBS_PER_CLASS, c)

    jitter = 0.05 * torch.randn(n, BLOBS_PER_CLASS, 2, generator=samples)
    amplitude = _uniform(samples, 0.7, 1.3, n, BLOBS_PER_CLASS)
    cy = (centers[:, 0] + jitter[..., 0])[:, :, None, None]
    cx = (centers[:, 1] + jitter[..., 1])[:, :, None, None]
    distance = (self._grid_y - cy).pow(2) + (self._grid_x - cx).pow(2)
    blobs = amplitude[:, :, None, None] * torch.exp(-distance / (2.0 * widths[None, :, None, None].pow(2)))
    # (n, blobs, H, W) x (blobs, C) -> (n, C, H, W)
    return torch.einsum("nbhw,bc->nchw", blobs, colors)

  def _stripes(self, prototype: torch.Generator, samples: torch.Generator, stripe_index: int) -> Tensor:
    n = self.samples_per_class
    n_stripes = max(1, self._kinds.count(STRIPES))
    angle = math.pi * stripe_index / n_stripes + float(_uniform(prototype, -0.1, 0.1, 1))
    frequency = float(_uniform(prototype, 2.0, 6.0, 1))
    light = _uniform(prototype, 0.5, 1.0, self._channels)
    dark = _uniform(prototype, 0.0, 0.4, self._channels)

    phase = _uniform(samples, 0.0, 2.0 * math.pi, n)
    tilt = angle + 0.05 * torch.randn(n, generator=samples)
    position = (self._grid_x[None] * torch.cos(tilt)[:, None, None]
                + self._grid_y[None] * torch.sin(tilt)[:, None, None])
    wave = 0.5 + 0.5 * torch.sin(2.0 * math.pi * frequency * position + phase[:, None, None])
    return wave[:, None] * light[None, :, None, None] + (1.0 - wave[:, None]) * dark[None, :, None, None]

  def describe(self) -> Dict[str, Any]:
    return {
        "type": self.source_type,
        "num_classes": self.num_classes,
        "samples_per_class": self.samples_per_class,
        "image_size": self._image_size,
        "channels": self._channels,
        "noise": self.noise,
        "seed": self.seed,
    }
