"""Loss terms for the adversary (attack decoder) and the protector (encoder + classifier).

Norm convention: reconstruction and perceptual distances are the *unnormalized*
squared Euclidean norm per sample, averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch.nn import functional as F

EPS = 1e-7  # discriminator output clamp


@dataclass(frozen=True)
class HyperParams:
    lambda1: float = 0.0  # negative pixel-reconstruction weight (protector)
    lambda2: float = 0.0  # negative perceptual weight (protector)
    mu1: float = 0.0  # GAN weight (decoder)
    mu2: float = 0.0  # perceptual weight (decoder)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "mu1", "mu2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample_sq(diff: torch.Tensor) -> torch.Tensor:
    return diff.pow(2).flatten(1).sum(dim=1)


def pixel_recon_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    _check_shapes(x_hat, x)
    return _per_sample_sq(x_hat - x).mean()


def gan_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Mean of log(1 - D(x_hat)); the decoder minimizes it."""
    return torch.log1p(-d_fake.clamp(EPS, 1 - EPS)).mean()


def gan_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Mean of log(1 - D(x)) + log D(x_hat); the discriminator maximizes it.

    The label convention (D high on reconstructions) is kept as written in the
    original objective.
    """
    real = torch.log1p(-d_real.clamp(EPS, 1 - EPS))
    fake = torch.log(d_fake.clamp(EPS, 1 - EPS))
    return real.mean() + fake.mean()


def perceptual_loss(
    g: Callable[[torch.Tensor], Sequence[torch.Tensor]], x_hat: torch.Tensor, x: torch.Tensor
) -> torch.Tensor:
    _check_shapes(x_hat, x)
    feats_hat, feats = g(x_hat), g(x)
    total = 0.0
    for a, b in zip(feats_hat, feats):
        total = total + _per_sample_sq(a - b)
    return total.mean()


def utility_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy from logits, averaged over attributes and batch."""
    if logits.shape != labels.shape:
        raise ValueError(f"logit arity {tuple(logits.shape)} != label arity {tuple(labels.shape)}")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def adversary_objective(hp: HyperParams, pixel, gan_gen=0.0, perc=0.0):
    return pixel + hp.mu1 * gan_gen + hp.mu2 * perc


def protector_objective(hp: HyperParams, utility, pixel=0.0, perc=0.0):
    return utility - hp.lambda1 * pixel - hp.lambda2 * perc


def feature_attack_loss(mapped: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ||M(Z) - C(X)||^2."""
    _check_shapes(mapped, target)
    return _per_sample_sq(mapped - target).mean()


def identity_loss(logits: torch.Tensor, identities: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, identities)
