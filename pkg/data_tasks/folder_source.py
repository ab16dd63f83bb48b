"""
Directory-of-class-folders image source.

Layout: root/<class_name>/<image files>. Images are decoded with torchvision, converted to
RGB or grayscale to match the requested channel count, and resized to a square.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch
from torch import Tensor
from torchvision.io import ImageReadMode, decode_image, read_file
from torchvision.transforms.v2 import functional as TF

from common.errors import ConfigurationError, ValidationError
from .base_image_source import BaseImageSource

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp")


class FolderImageSource(BaseImageSource):
  """
  Args:
      root: Dataset root containing one sub-directory per class
      image_size: Output square side length
      channels: 3 for RGB, 1 for grayscale
      max_per_class: Optional cap on images per class (first files in sorted order)
  """

  def __init__(self,
               root: Union[str, Path],
               image_size: int = 32,
               channels: int = 3,
               max_per_class: Optional[int] = None):
    self.root = Path(root)
    if not self.root.is_dir():
      raise ConfigurationError(f"Dataset root {self.root} is not a directory")
    if channels not in (1, 3):
      raise ConfigurationError(f"Folder source supports 1 or 3 channels, got {channels}")
    self._image_size = int(image_size)
    self._channels = int(channels)
    self.max_per_class = max_per_class
    self._classes = sorted(p.name for p in self.root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not self._classes:
      raise ConfigurationError(f"No class directories under {self.root}")
    self._cache: Dict[int, Tensor] = {}
    logger.info("Folder source %s: %d classes", self.root, len(self._classes))

  @property
  def source_type(self) -> str:
    return "folder"

  @property
  def num_channels(self) -> int:
    return self._channels

  @property
  def image_size(self) -> int:
    return self._image_size

  def class_names(self) -> List[str]:
    return list(self._classes)

  def _files(self, class_index: int) -> List[Path]:
    directory = self.root / self._classes[class_index]
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return files[:self.max_per_class] if self.max_per_class else files

  def _decode(self, path: Path) -> Tensor:
    mode = ImageReadMode.RGB if self._channels == 3 else ImageReadMode.GRAY
    try:
      image = decode_image(read_file(str(path)), mode=mode)
    except RuntimeError as e:
      logger.error("Failed to decode %s: %s", path, str(e))
      raise ValidationError(f"Cannot decode image {path}: {e}") from e
    image = TF.resize(image, [self._image_size, self._image_size], antialias=True)
    return image.to(torch.float32) / 255.0

  def load_class(self, class_index: int) -> Tensor:
    if not 0 <= class_index < len(self._classes):
      raise ValidationError(f"Class index {class_index} out of range [0, {len(self._classes)})")
    if class_index not in self._cache:
      files = self._files(class_index)
      if not files:
        raise ValidationError(f"No images for class {self._classes[class_index]!r}")
      self._cache[class_index] = torch.stack([self._decode(path) for path in files])
      logger.debug("Loaded %d images for class %s", len(files), self._classes[class_index])
    return self._cache[class_index]

  def describe(self) -> Dict[str, Any]:
    return {
        "type": self.source_type,
        "root": str(self.root),
        "image_size": self._image_size,
        "channels": self._channels,
        "max_per_class": self.max_per_class,
    }
