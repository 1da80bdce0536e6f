"""Training objectives. Every loss reduces by mean so weights stay
independent of patch size and batch size."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, fields

import torch
import torch.nn.functional as F

LOSS_COLUMNS = ("step", "recon", "perceptual", "kl", "seg", "adv_g", "adv_d", "total_g")


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_perc: float = 0.1
    lambda_kl: float = 0.001
    lambda_seg: float = 1.0
    lambda_adv: float = 0.01

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class FTLParams:
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 0.75
    smooth: float = 1.0

    def __post_init__(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ValueError("alpha + beta must equal 1")
        if self.gamma <= 0 or self.smooth <= 0:
            raise ValueError("gamma and smooth must be positive")


@dataclass
class LossRecord:
    recon: float
    perceptual: float
    kl: float
    seg: float
    adv_g: float
    adv_d: float
    total_g: float

    def row(self, step: int) -> list:
        return [step] + [getattr(self, c) for c in LOSS_COLUMNS[1:]]

    def as_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(recon, target)
    return ((recon - target) ** 2).mean()


def perceptual_loss(recon: torch.Tensor, target: torch.Tensor, extractor) -> torch.Tensor:
    """Mean over levels of the per-level feature MSE."""
    _same_shape(recon, target)
    fr = extractor(recon)
    ft = extractor(target)
    return sum(((a - b) ** 2).mean() for a, b in zip(fr, ft)) / len(fr)


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) averaged over latent dims and batch."""
    return (0.5 * (mu ** 2 + torch.exp(logvar) - 1.0 - logvar)).mean()


def focal_tversky_loss(probs: torch.Tensor, target: torch.Tensor, params: FTLParams = FTLParams()) -> torch.Tensor:
    """(1 - TI) ** gamma.

    A 4D input (N, C, H, W) is scored per sample and averaged over the
    batch; any other shape is scored as one sample.
    """
    _same_shape(probs, target)
    target = target.to(probs.dtype)
    if probs.dim() == 4:
        p, t = probs.flatten(1), target.flatten(1)
    else:
        p, t = probs.reshape(1, -1), target.reshape(1, -1)
    tp = (p * t).sum(1)
    fn = ((1 - p) * t).sum(1)
    fp = (p * (1 - t)).sum(1)
    ti = (tp + params.smooth) / (tp + params.alpha * fn + params.beta * fp + params.smooth)
    gap = 1.0 - ti
    # x**gamma has an infinite slope at 0 for gamma < 1; the inner clamp keeps
    # the discarded branch of where() free of inf/nan gradients
    safe = gap.clamp_min(torch.finfo(gap.dtype).tiny)
    return torch.where(gap > 0, safe.pow(params.gamma), torch.zeros_like(gap)).mean()


def adversarial_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """BCE(real, 1) + BCE(fake, 0), each averaged over the logit grid."""
    _same_shape(real_logits, fake_logits)
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return real + fake


def adversarial_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: BCE(fake, 1)."""
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def total_generator_loss(components: dict, w: LossWeights = LossWeights()):
    """Weighted sum of recon, perceptual, kl, seg and adv_g.

    Works on floats or tensors; raises if any component is non-finite.
    """
    for name in ("recon", "perceptual", "kl", "seg", "adv_g"):
        v = components[name]
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {name!r}: {v}")
    return (w.lambda_rec * components["recon"] + w.lambda_perc * components["perceptual"]
            + w.lambda_kl * components["kl"] + w.lambda_seg * components["seg"]
            + w.lambda_adv * components["adv_g"])
