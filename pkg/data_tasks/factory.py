"""
Image source factory.

Creates image sources from an explicit type, a descriptor dictionary, or the environment.
"""

import logging
import os
from typing import Any, Dict, List, Optional

from common.errors import ConfigurationError
from .base_image_source import BaseImageSource
from .folder_source import FolderImageSource
from .synthetic_source import SyntheticImageSource

logger = logging.getLogger(__name__)

SYNTHETIC_TYPES = {
    "synthetic_blobs": "blobs",
    "synthetic_stripes": "stripes",
    "synthetic_mixed": "mixed",
    "synthetic": "mixed",
}


class ImageSourceFactory:
  """
  Factory for image source instances.

  The type comes from the argument, else from AFA_SOURCE_TYPE, else "folder" when
  AFA_DATA_ROOT names an existing directory, else the mixed synthetic source.
  """

  @staticmethod
  def create_source(source_type: Optional[str] = None, **kwargs) -> BaseImageSource:
    """
    Create an image source.

    Args:
        source_type: "synthetic_blobs", "synthetic_stripes", "synthetic_mixed", "folder",
                     or None for auto-detection
        **kwargs: Constructor arguments of the selected source. The folder source falls
                  back to AFA_DATA_ROOT when no root is given.

    Returns:
        BaseImageSource: Configured source

    Raises:
        ConfigurationError: Unknown type, bad arguments, or a folder source without a root
    """
    if source_type is None:
      source_type = ImageSourceFactory._auto_detect_source_type()
    source_type = source_type.lower().strip()
    logger.info("Creating image source: type=%s", source_type)

    try:
      if source_type in SYNTHETIC_TYPES:
        return SyntheticImageSource(kind=SYNTHETIC_TYPES[source_type], **kwargs)
      if source_type == "folder":
        root = kwargs.pop("root", None) or os.getenv("AFA_DATA_ROOT")
        if not root:
          raise ConfigurationError("Folder source needs a root (descriptor 'root' or AFA_DATA_ROOT)")
        return FolderImageSource(root, **kwargs)
    except TypeError as e:
      raise ConfigurationError(f"Bad arguments for {source_type} source: {e}") from e

    raise ConfigurationError(f"Unknown image source type: {source_type}. "
                             f"Supported types: {', '.join(ImageSourceFactory.get_available_types())}")

  @staticmethod
  def _auto_detect_source_type() -> str:
    source_env = os.getenv("AFA_SOURCE_TYPE", "").lower()
    if source_env:
      logger.info("Image source type from environment: %s", source_env)
      return source_env

    data_root = os.getenv("AFA_DATA_ROOT")
    if data_root and os.path.isdir(data_root):
      logger.info("AFA_DATA_ROOT set to %s, using folder source", data_root)
      return "folder"

    logger.info("No data root configured, defaulting to the mixed synthetic source")
    return "synthetic_mixed"

  @staticmethod
  def create_from_config(config: Dict[str, Any]) -> BaseImageSource:
    """
    Create a source from a descriptor such as BaseImageSource.describe() returns.

    Args:
        config: Descriptor; "type" selects the source, other keys are constructor arguments
    """
    params = {k: v for k, v in config.items() if k != "type"}
    return ImageSourceFactory.create_source(source_type=config.get("type"), **params)

  @staticmethod
  def get_available_types() -> List[str]:
    return ["synthetic_blobs", "synthetic_stripes", "synthetic_mixed", "folder"]


def create_source(**kwargs) -> BaseImageSource:
  """Shorthand for ImageSourceFactory.create_source()."""
  return ImageSourceFactory.create_source(**kwargs)
