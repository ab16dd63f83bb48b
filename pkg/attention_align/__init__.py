"""Attention maps of conv activations and their adversarial alignment."""

from .attention import attention_features, attention_map, flatten_attention, normalize_attention, with_attention
from .discriminator import (
    EPSILON,
    AdvLossPair,
    Discriminator,
    DiscriminatorBank,
    adv_step,
    discriminator_accuracy,
    discriminator_loss,
    feature_adv_loss,
    make_optimizer,
)

__all__ = [
    "attention_features",
    "attention_map",
    "flatten_attention",
    "normalize_attention",
    "with_attention",
    "EPSILON",
    "AdvLossPair",
    "Discriminator",
    "DiscriminatorBank",
    "adv_step",
    "discriminator_accuracy",
    "discriminator_loss",
    "feature_adv_loss",
    "make_optimizer",
]
