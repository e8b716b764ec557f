"""Training objective terms and the epoch schedules for lr and shape weight."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import torch
import torch.nn.functional as F


class TrainingFault(RuntimeError):
    """A loss term went NaN/Inf; the run cannot continue."""


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 100.0
    lambda_shape_max: float = 100.0
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_gp: float = 10.0
    n_critic: int = 5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


TERMS = ("d_adv", "d_cls", "d_gp", "g_adv", "g_cls", "g_rec", "l_seg", "l_shape", "total_G", "total_D")


@dataclass
class LossReport:
    epoch: int
    step: int
    d_adv: float = 0.0
    d_cls: float = 0.0
    d_gp: float = 0.0
    g_adv: float = 0.0
    g_cls: float = 0.0
    g_rec: float = 0.0
    l_seg: float = 0.0
    l_shape: float = 0.0
    lambda_shape: float = 0.0
    total_G: float = 0.0
    total_D: float = 0.0
    lr: float = 0.0

    def recompute_total_G(self, weights: LossWeights) -> float:
        return (self.g_adv + weights.lambda_cls * self.g_cls + weights.lambda_rec * self.g_rec
                + weights.lambda_seg * self.l_seg + self.lambda_shape * self.l_shape)

    def check(self, weights: LossWeights, rtol: float = 1e-6) -> None:
        for k in TERMS:
            if not math.isfinite(getattr(self, k)):
                raise TrainingFault(f"non-finite {k} at epoch {self.epoch} step {self.step}")
        expect = self.recompute_total_G(weights)
        if abs(expect - self.total_G) > rtol * max(1.0, abs(expect)):
            raise TrainingFault(f"total_G {self.total_G} != recomposed {expect}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise TrainingFault(f"non-finite loss term {name}")
    return value


def seg_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross entropy of 2-channel logits against a binary mask.

    Accepts ``2xHxW``/``HxW`` or batched ``Bx2xHxW``/``BxHxW``.
    """
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    target = torch.as_tensor(target)
    if ((target != 0) & (target != 1)).any():
        raise ValueError("segmentation target must be binary")
    return F.cross_entropy(logits, target.long())


def shape_consistency_loss(seg_of_fake: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross entropy between the segmentation of a translated image and the
    source annotation. Same math as :func:`seg_cross_entropy`; the caller must
    keep the fake attached so gradients also reach the translation stream."""
    return seg_cross_entropy(seg_of_fake, target)


def cycle_loss(recovered: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    if recovered.shape != original.shape:
        raise ValueError(f"shape mismatch {tuple(recovered.shape)} vs {tuple(original.shape)}")
    return (recovered - original).abs().mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Modality CE; ``labels`` are class indices."""
    return F.cross_entropy(logits, labels.long())


def gradient_penalty(D, real: torch.Tensor, fake: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Mean over interpolates of (||d src / d x_hat||_2 - 1)^2.

    ``alpha`` has shape ``Bx1x1x1``; the norm is taken per sample over all
    pixels of the realness map's summed output.
    """
    x_hat = (alpha * real.detach() + (1 - alpha) * fake.detach()).requires_grad_(True)
    src, _ = D(x_hat)
    grad = torch.autograd.grad(src.sum(), x_hat, create_graph=True)[0]
    return ((grad.flatten(1).norm(2, dim=1) - 1) ** 2).mean()


def critic_losses(D, real: torch.Tensor, fake: torch.Tensor, source_labels: torch.Tensor,
                  weights: LossWeights, alpha: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Critic side: Wasserstein gap, gradient penalty and real-image modality CE."""
    src_real, cls_real = D(real)
    src_fake, _ = D(fake.detach())
    terms = {
        "d_adv": src_fake.mean() - src_real.mean(),
        "d_cls": classification_loss(cls_real, source_labels),
        "d_gp": gradient_penalty(D, real, fake, alpha),
    }
    terms["total_D"] = terms["d_adv"] + weights.lambda_gp * terms["d_gp"] + weights.lambda_cls * terms["d_cls"]
    for k, v in terms.items():
        _check_finite(k, v)
    return terms


def generator_adversarial_losses(D, fake: torch.Tensor, target_labels: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Generator side: fool the critic and hit the target modality."""
    src_fake, cls_fake = D(fake)
    terms = {"g_adv": -src_fake.mean(), "g_cls": classification_loss(cls_fake, target_labels)}
    for k, v in terms.items():
        _check_finite(k, v)
    return terms


def adversarial_losses(D, real: torch.Tensor, fake: torch.Tensor, source_labels: torch.Tensor,
                       target_labels: torch.Tensor, weights: LossWeights,
                       alpha: Optional[torch.Tensor] = None):
    """Both sides of the Wasserstein + classification objective.

    Returns ``(d_terms, g_terms)``; ``g_terms["total"]`` is the weighted
    generator-side sum. ``alpha`` (Bx1x1x1) defaults to uniform draws.
    """
    if alpha is None:
        alpha = torch.rand(real.shape[0], 1, 1, 1, dtype=real.dtype)
    d_terms = critic_losses(D, real, fake, source_labels, weights, alpha)
    g_terms = generator_adversarial_losses(D, fake, target_labels)
    g_terms["total"] = g_terms["g_adv"] + weights.lambda_cls * g_terms["g_cls"]
    return d_terms, g_terms


def lambda_shape_schedule(epoch: int, weights: LossWeights = LossWeights(), ramp_end: int = 60) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if ramp_end <= 0:
        return weights.lambda_shape_max
    return weights.lambda_shape_max * min(epoch / ramp_end, 1.0)


def lr_schedule(epoch: int, lr0: float = 1e-4, lr_end: float = 1e-6, hold: int = 60, total: int = 100) -> float:
    if epoch < 0 or epoch > total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if epoch < hold or total == hold:
        return lr0
    t = (epoch - hold) / (total - hold)
    return lr0 * (1.0 - t) + lr_end * t


def total_generator_loss(terms: Dict[str, torch.Tensor], epoch: int, weights: LossWeights = LossWeights(),
                         ramp_end: int = 60):
    """Combine generator-side terms; missing terms count as zero.

    Returns ``(total, lambda_shape)``.
    """
    lam_shape = lambda_shape_schedule(epoch, weights, ramp_end)
    zero = 0.0
    total = (terms.get("g_adv", zero)
             + weights.lambda_cls * terms.get("g_cls", zero)
             + weights.lambda_rec * terms.get("g_rec", zero)
             + weights.lambda_seg * terms.get("l_seg", zero)
             + lam_shape * terms.get("l_shape", zero))
    if isinstance(total, torch.Tensor):
        _check_finite("total_G", total)
    elif not math.isfinite(total):
        raise TrainingFault("non-finite total_G")
    return total, lam_shape
