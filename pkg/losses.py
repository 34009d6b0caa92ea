"""Generator and discriminator objectives.

The generator minimises  adv + λ1·L1 + λ2·class + λ3·perceptual.
L1 and perceptual terms are element means, so λ1 = 100 keeps its meaning at
any resolution. The generator's adversarial term is the non-saturating
-log D(G(I)).
"""
import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F

from dataio import LabelMode
from errors import NumericError, ShapeError
from networks import extract_features

PROB_EPS = 1e-7

COMPONENTS = ("adv", "l1", "classification", "perceptual")


class LossMode(str, Enum):
    FULL        = "full"
    L1_ONLY     = "l1_only"
    PER_ONLY    = "per_only"
    L1_PLUS_PER = "l1_plus_per"

    @property
    def active_terms(self):
        return _ACTIVE[self]


_ACTIVE = {
    LossMode.FULL:        frozenset({"adv", "l1", "classification", "perceptual"}),
    LossMode.L1_ONLY:     frozenset({"adv", "l1"}),
    LossMode.PER_ONLY:    frozenset({"adv", "perceptual"}),
    LossMode.L1_PLUS_PER: frozenset({"adv", "l1", "perceptual"}),
}


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 100.0
    lambda2: float = 10.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossComponents:
    adv: float = 0.0
    l1: float = 0.0
    classification: float = 0.0
    perceptual: float = 0.0


@dataclass(frozen=True)
class LossReport:
    adv: float
    l1: float
    classification: float
    perceptual: float
    total: float

    def to_log_line(self, step):
        vals = (self.adv, self.l1, self.classification, self.perceptual, self.total)
        return " ".join([str(step)] + ["%.9g" % v for v in vals])


def parse_log_line(line):
    parts = line.split()
    if len(parts) != 6:
        raise ValueError(f"malformed training log line: {line!r}")
    adv, l1, cls, per, total = (float(v) for v in parts[1:])
    return int(parts[0]), LossReport(adv, l1, cls, per, total)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_chroma_loss(ab_pred, ab_target):
    _same_shape(ab_pred, ab_target, "l1_chroma_loss")
    return (ab_pred - ab_target).abs().mean()


def perceptual_loss(V, img_pred, img_target):
    """Per-element mean of squared feature differences, averaged over the batch."""
    _same_shape(img_pred, img_target, "perceptual_loss")
    diff = extract_features(V, img_pred) - extract_features(V, img_target)
    return diff.pow(2).mean()


def classification_loss(class_logits, labels, label_mode=LabelMode.SINGLE_CLASS):
    _same_shape(class_logits, labels, "classification_loss")
    labels = labels.to(class_logits.dtype)
    if LabelMode(label_mode) is LabelMode.SINGLE_CLASS:
        return -(labels * F.log_softmax(class_logits, dim=1)).sum(dim=1).mean()
    return F.binary_cross_entropy_with_logits(class_logits, labels)


def discriminator_loss(p_real, p_fake):
    p_real = p_real.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_fake = p_fake.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -torch.log(p_real).mean() - torch.log(1.0 - p_fake).mean()


def generator_adversarial_loss(p_fake):
    return -torch.log(p_fake.clamp(PROB_EPS, 1.0 - PROB_EPS)).mean()


def adversarial_losses(D, real_images, fake_images):
    _same_shape(real_images, fake_images, "adversarial_losses")
    p_real, p_fake = D(real_images), D(fake_images)
    return discriminator_loss(p_real, p_fake), generator_adversarial_loss(p_fake)


def _value(x):
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_generator_loss(components, weights):
    vals = {name: _value(getattr(components, name)) for name in COMPONENTS}
    for name, v in vals.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {name} loss: {v}", component=name)
    total = (vals["adv"] + weights.lambda1 * vals["l1"]
             + weights.lambda2 * vals["classification"] + weights.lambda3 * vals["perceptual"])
    return LossReport(total=total, **vals)


def generator_objective(terms, weights, mode=LossMode.FULL):
    """Weighted total of the active terms as a tensor, plus its LossReport.

    `terms` maps component names to scalar tensors; inactive or absent
    components count as zero.
    """
    active = LossMode(mode).active_terms
    zero = next(iter(terms.values())).new_zeros(())
    parts = {name: terms[name] if name in active and name in terms else zero
             for name in COMPONENTS}
    report = total_generator_loss(LossComponents(**parts), weights)
    total = (parts["adv"] + weights.lambda1 * parts["l1"]
             + weights.lambda2 * parts["classification"] + weights.lambda3 * parts["perceptual"])
    return total, report
