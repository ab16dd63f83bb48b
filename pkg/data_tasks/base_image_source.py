# pylint: disable=unnecessary-ellipsis
"""
Abstract base class for labelled image sources.

A source exposes a fixed, ordered list of classes and the images of each class. Task
sequences are carved out of a source by splitting its classes into disjoint groups.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List

from torch import Tensor


class BaseImageSource(ABC):
  """
  Interface every image source implements.

  Images are float tensors in [0, 1] with shape (channels, image_size, image_size).
  """

  @property
  @abstractmethod
  def source_type(self) -> str:
    """Factory name of this source."""
    ...

  @property
  @abstractmethod
  def num_channels(self) -> int:
    ...

  @property
  @abstractmethod
  def image_size(self) -> int:
    ...

  @abstractmethod
  def class_names(self) -> List[str]:
    """
    Ordered class names.

    Returns:
        List[str]: Unique names; the index in this list is the class index
    """
    ...

  @abstractmethod
  def load_class(self, class_index: int) -> Tensor:
    """
    Load every image of one class.

    Args:
        class_index: Index into class_names()

    Returns:
        Tensor: (K, C, H, W) float images in a stable order

    Raises:
        ValidationError: Index out of range or no images for the class
    """
    ...

  @abstractmethod
  def describe(self) -> Dict[str, Any]:
    """
    Descriptor that recreates this source through the factory.

    Returns:
        Dict[str, Any]: JSON-serializable, includes a "type" key
    """
    ...
