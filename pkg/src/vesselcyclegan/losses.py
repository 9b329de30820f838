"""Loss terms for segmenter pretraining and vessel-routed CycleGAN training.

All functions take tensors (or objects exposing ``.pixels``) and return
0-dim tensors so they compose with autograd.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch

from .errors import DimensionError, NumericError

DICE_SMOOTH = 1.0
BCE_CLAMP = 1e-7


def _t(x) -> torch.Tensor:
    return x.pixels if hasattr(x, "pixels") else x


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass
class LossWeights:
    lambda_a: float = 100.0
    lambda_b: float = 100.0
    lambda_idt: float = 1.0
    lambda_seg: float = 1.0

    def validate(self) -> list[str]:
        return [f"{k} must be >= 0" for k, v in dataclasses.asdict(self).items() if not v >= 0]


GENERATOR_TERMS = ("adv_g_a", "adv_g_b", "cyc_a", "cyc_b", "idt_a", "idt_b", "seg_a", "seg_b")
DISCRIMINATOR_TERMS = ("adv_d_a", "adv_d_b")


@dataclass
class LossRecord:
    step: int = 0
    adv_g_a: float = 0.0
    adv_g_b: float = 0.0
    adv_d_a: float = 0.0
    adv_d_b: float = 0.0
    cyc_a: float = 0.0
    cyc_b: float = 0.0
    idt_a: float = 0.0
    idt_b: float = 0.0
    seg_a: float = 0.0
    seg_b: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in GENERATOR_TERMS + DISCRIMINATOR_TERMS + ("total_g", "total_d")}


def cycle_loss(real, reconstructed, lambda_dom: float) -> torch.Tensor:
    """``lambda_dom * mean|real - reconstructed|``."""
    real, reconstructed = _t(real), _t(reconstructed)
    _same_shape(real, reconstructed, "cycle_loss")
    return lambda_dom * (real - reconstructed).abs().mean()


def identity_loss(real, idt_output, lambda_dom: float, lambda_idt: float) -> torch.Tensor:
    """Vessel-to-image reconstruction: ``idt_output`` is ``G_dom(V(real))``."""
    real, idt_output = _t(real), _t(idt_output)
    _same_shape(real, idt_output, "identity_loss")
    return lambda_dom * lambda_idt * (real - idt_output).abs().mean()


def soft_dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    pred, target = _t(pred), _t(target)
    _same_shape(pred, target, "soft_dice_loss")
    inter = (pred * target).sum()
    return 1 - (2 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def seg_consistency_loss(v_of_fake, v_of_real, lambda_seg: float) -> torch.Tensor:
    """Dice between the vessels found in a fake and in its source image.

    The real-side map is a fixed target; gradients reach only ``v_of_fake``.
    """
    v_of_fake, v_of_real = _t(v_of_fake), _t(v_of_real)
    _same_shape(v_of_fake, v_of_real, "seg_consistency_loss")
    return lambda_seg * soft_dice_loss(v_of_fake, v_of_real.detach())


def bce_loss(pred, target) -> torch.Tensor:
    pred, target = _t(pred), _t(target)
    _same_shape(pred, target, "bce_loss")
    p = pred.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def segmentation_loss(pred, target) -> torch.Tensor:
    """Equal-weight BCE + soft Dice, used to pretrain the segmenter."""
    return 0.5 * bce_loss(pred, target) + 0.5 * soft_dice_loss(pred, target)


def adversarial_loss(logits, target_is_real: bool) -> torch.Tensor:
    """Least-squares GAN objective against target 1 (real) or 0 (fake)."""
    logits = _t(logits)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite discriminator logits", term="adversarial")
    target = 1.0 if target_is_real else 0.0
    return ((logits - target) ** 2).mean()


def discriminator_loss(real_logits, fake_logits) -> torch.Tensor:
    return 0.5 * (adversarial_loss(real_logits, True) + adversarial_loss(fake_logits, False))


def total_generator_loss(terms, weights: LossWeights | None = None):
    """Sum of the generator-side terms; weights are already folded into each.

    ``terms`` is a mapping or a LossRecord. ``weights`` is accepted for
    interface symmetry and is not reapplied.
    """
    if isinstance(terms, LossRecord):
        terms = terms.terms()
    total = 0.0
    for name in GENERATOR_TERMS:
        total = total + terms[name]
    return total


def check_finite(terms: dict) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name} is not finite ({v})", term=name)
