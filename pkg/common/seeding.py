"""
Deterministic seeding.

A run has one global seed. Every consumer of randomness (weight init, data split,
augmentation, loader order, discriminator init) derives its own stream from that seed
plus a stable key, so adding a consumer never shifts the numbers another one sees.
"""

import hashlib
import logging
import random

import numpy as np
import torch

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *keys) -> int:
  """
  Derive a 63-bit seed from a base seed and a sequence of keys.

  Args:
      seed: Base run seed
      *keys: Any values with a stable str() form (ints, names)

  Returns:
      int: Derived seed, stable across processes and Python versions
  """
  material = ":".join([str(int(seed))] + [str(k) for k in keys]).encode("utf-8")
  digest = hashlib.sha256(material).digest()
  return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int, *keys) -> torch.Generator:
  """Create a CPU torch.Generator seeded from (seed, *keys)."""
  generator = torch.Generator()
  generator.manual_seed(derive_seed(seed, *keys))
  return generator


def seed_everything(seed: int) -> None:
  """Seed python, numpy and torch global generators and request deterministic kernels."""
  random.seed(seed)
  np.random.seed(seed % (2 ** 32))
  torch.manual_seed(seed)
  torch.use_deterministic_algorithms(True, warn_only=True)
  logger.debug("Seeded global generators with %d", seed)
