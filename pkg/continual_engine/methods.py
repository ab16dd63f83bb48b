"""
Method strategies and their loss weights.

A method is a name plus LossWeights: lambda1 weighs logit distillation, lambda2 the
conv-level term (adversarial attention alignment or L2) and lambda3 the fc-level term (MMD
or L2). Ablations are written as a base name with variant overrides, for example
"afa[logit=l2]" or "afa[conv=l2,fc=l2]".
"""

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Tuple

from common.errors import ConfigurationError

logger = logging.getLogger(__name__)


class MethodName(Enum):
  """Training strategies."""
  FINETUNE = "finetune"
  JOINT = "joint"
  LWF = "lwf"
  AFA = "afa"
  AFA_ADV = "afa_adv"
  AFA_MMD = "afa_mmd"


class LogitVariant(Enum):
  KD = "kd"
  L2 = "l2"


class ConvVariant(Enum):
  ADVERSARIAL = "adversarial"
  L2 = "l2"
  OFF = "off"


class FcVariant(Enum):
  MMD = "mmd"
  L2 = "l2"
  OFF = "off"


# lambda1 when the L2 logit variant replaces KD
L2_LOGIT_LAMBDA1 = 0.1


@dataclass(frozen=True)
class LossWeights:
  """Weights and variant switches of the combined objective."""
  lambda1: float = 0.0
  lambda2: float = 0.0
  lambda3: float = 0.0
  logit_variant: LogitVariant = LogitVariant.KD
  conv_variant: ConvVariant = ConvVariant.OFF
  fc_variant: FcVariant = FcVariant.OFF

  def __post_init__(self):
    for name in ("lambda1", "lambda2", "lambda3"):
      value = getattr(self, name)
      if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
        raise ConfigurationError(f"{name} must be a finite non-negative number, got {value!r}")
      object.__setattr__(self, name, float(value))
    try:
      object.__setattr__(self, "logit_variant", LogitVariant(self.logit_variant))
      object.__setattr__(self, "conv_variant", ConvVariant(self.conv_variant))
      object.__setattr__(self, "fc_variant", FcVariant(self.fc_variant))
    except ValueError as e:
      raise ConfigurationError(f"Invalid loss variant: {e}") from e

  @property
  def uses_distillation(self) -> bool:
    return self.lambda1 > 0

  @property
  def uses_conv(self) -> bool:
    return self.lambda2 > 0 and self.conv_variant is not ConvVariant.OFF

  @property
  def uses_adversarial(self) -> bool:
    return self.uses_conv and self.conv_variant is ConvVariant.ADVERSARIAL

  @property
  def uses_fc(self) -> bool:
    return self.lambda3 > 0 and self.fc_variant is not FcVariant.OFF

  @property
  def any_auxiliary(self) -> bool:
    return self.uses_distillation or self.uses_conv or self.uses_fc

  def to_dict(self) -> Dict[str, Any]:
    data = asdict(self)
    for key in ("logit_variant", "conv_variant", "fc_variant"):
      data[key] = getattr(self, key).value
    return data


@dataclass(frozen=True)
class MethodSpec:
  """A named strategy with its weights; label distinguishes ablations of the same name."""
  name: MethodName
  weights: LossWeights = field(default_factory=LossWeights)
  label: str = ""

  def __post_init__(self):
    name = MethodName(self.name)
    object.__setattr__(self, "name", name)
    if not self.label:
      object.__setattr__(self, "label", name.value)
    w = self.weights
    if name in (MethodName.FINETUNE, MethodName.JOINT) and (w.lambda1 or w.lambda2 or w.lambda3):
      raise ConfigurationError(f"{name.value} takes no auxiliary loss weights")
    if name is MethodName.LWF and (w.lambda2 or w.lambda3):
      raise ConfigurationError("lwf uses distillation only (lambda2 = lambda3 = 0)")
    if name is MethodName.AFA_ADV and w.lambda3:
      raise ConfigurationError("afa_adv has no fc alignment (lambda3 = 0)")
    if name is MethodName.AFA_MMD and w.lambda2:
      raise ConfigurationError("afa_mmd has no conv alignment (lambda2 = 0)")

  @property
  def is_joint(self) -> bool:
    return self.name is MethodName.JOINT

  def to_dict(self) -> Dict[str, Any]:
    return {"name": self.name.value, "label": self.label, "weights": self.weights.to_dict()}


_LABEL = re.compile(r"^\s*([a-z_]+)\s*(?:\[([^\]]*)\])?\s*$")
_VARIANT_KEYS = {"logit": "logit_variant", "conv": "conv_variant", "fc": "fc_variant"}


def parse_label(label: str) -> Tuple[MethodName, Dict[str, str]]:
  """Split "afa[logit=l2,fc=l2]" into (MethodName.AFA, {"logit_variant": "l2", "fc_variant": "l2"})."""
  match = _LABEL.match(label)
  if not match:
    raise ConfigurationError(f"Malformed method label {label!r}")
  try:
    name = MethodName(match.group(1))
  except ValueError as e:
    raise ConfigurationError(f"Unknown method {match.group(1)!r}; "
                             f"known: {', '.join(m.value for m in MethodName)}") from e
  variants: Dict[str, str] = {}
  for part in filter(None, (p.strip() for p in (match.group(2) or "").split(","))):
    key, _, value = part.partition("=")
    if key.strip() not in _VARIANT_KEYS or not value.strip():
      raise ConfigurationError(f"Bad variant override {part!r} in {label!r} (use logit=, conv= or fc=)")
    variants[_VARIANT_KEYS[key.strip()]] = value.strip()
  if variants and name in (MethodName.FINETUNE, MethodName.JOINT):
    raise ConfigurationError(f"{name.value} has no loss variants to override")
  return name, variants


def default_weights(name: MethodName, n_tasks: int, variants: Optional[Mapping[str, str]] = None) -> LossWeights:
  """
  Default weights for a method on a sequence of n_tasks.

  lambda1 = 1 (0.1 with the L2 logit variant), lambda3 = 1, lambda2 = 1 for two tasks and
  0.1 for longer sequences.
  """
  variants = dict(variants or {})
  lambda2 = 1.0 if n_tasks <= 2 else 0.1
  lambda1 = L2_LOGIT_LAMBDA1 if variants.get("logit_variant") == LogitVariant.L2.value else 1.0

  if name in (MethodName.FINETUNE, MethodName.JOINT):
    return LossWeights()
  if name is MethodName.LWF:
    return LossWeights(lambda1=lambda1, **_only(variants, "logit_variant"))

  conv = variants.get("conv_variant", ConvVariant.ADVERSARIAL.value)
  fc = variants.get("fc_variant", FcVariant.MMD.value)
  logit = variants.get("logit_variant", LogitVariant.KD.value)
  if name is MethodName.AFA_ADV:
    return LossWeights(lambda1=lambda1, lambda2=lambda2, logit_variant=logit, conv_variant=conv)
  if name is MethodName.AFA_MMD:
    return LossWeights(lambda1=lambda1, lambda3=1.0, logit_variant=logit, fc_variant=fc)
  return LossWeights(lambda1=lambda1, lambda2=lambda2, lambda3=1.0,
                     logit_variant=logit, conv_variant=conv, fc_variant=fc)


def _only(variants: Mapping[str, str], key: str) -> Dict[str, str]:
  extra = set(variants) - {key}
  if extra:
    raise ConfigurationError(f"Variant overrides {sorted(extra)} do not apply to this method")
  return {k: v for k, v in variants.items() if k == key}


def make_method(label: str, n_tasks: int, overrides: Optional[Mapping[str, float]] = None) -> MethodSpec:
  """
  Build a MethodSpec from a label and optional lambda overrides.

  Overrides only touch the terms the method actually uses: a global lambda2 override
  leaves lwf and afa_mmd untouched.

  Args:
      label: Method name, optionally with variant overrides in brackets
      n_tasks: Sequence length (selects the default lambda2)
      overrides: Optional {"lambda1": .., "lambda2": .., "lambda3": ..}

  Raises:
      ConfigurationError: Unknown method, bad variants or invalid weights
  """
  name, variants = parse_label(label)
  weights = default_weights(name, n_tasks, variants)
  values = {"lambda1": weights.lambda1, "lambda2": weights.lambda2, "lambda3": weights.lambda3}
  for key, value in (overrides or {}).items():
    if value is None:
      continue
    if key not in values:
      raise ConfigurationError(f"Unknown weight override {key!r}")
    if not _term_enabled(name, key):
      logger.debug("Ignoring %s override for %s", key, label)
      continue
    values[key] = value
  weights = LossWeights(logit_variant=weights.logit_variant, conv_variant=weights.conv_variant,
                        fc_variant=weights.fc_variant, **values)
  return MethodSpec(name=name, weights=weights, label=label.replace(" ", ""))


def _term_enabled(name: MethodName, key: str) -> bool:
  enabled = {
      MethodName.FINETUNE: (),
      MethodName.JOINT: (),
      MethodName.LWF: ("lambda1",),
      MethodName.AFA: ("lambda1", "lambda2", "lambda3"),
      MethodName.AFA_ADV: ("lambda1", "lambda2"),
      MethodName.AFA_MMD: ("lambda1", "lambda3"),
  }
  return key in enabled[name]
