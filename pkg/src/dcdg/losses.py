"""Losses for indirect double-sided adaptation and semi-supervised segmentation.

Squared L2 norms are per-element means so that magnitudes do not depend on
image or feature-map size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, DomainError, ShapeError

BCE_EPS = 1e-7
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    fm: float = 1.0
    rec: float = 1.0
    dice: float = 1.0

    def __post_init__(self):
        for name in ("fm", "rec", "dice"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"LossWeights.{name} must be finite and >= 0, got {v!r}")


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(score, target) -> torch.Tensor:
    """Binary cross-entropy on probabilities clamped to [eps, 1-eps]; mean over elements."""
    score = _t(score)
    if isinstance(target, (int, float)):
        if target not in (0, 1):
            raise DomainError(f"bce target must be 0 or 1, got {target!r}")
        target = torch.full_like(score, float(target))
    else:
        target = _t(target).to(score.dtype)
        if not torch.all((target == 0) | (target == 1)):
            raise DomainError("bce targets must all be 0 or 1")
    s = score.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(target * torch.log(s) + (1 - target) * torch.log1p(-s)).mean()


def feature_match_loss(f_l, fp_l, f_u, fp_u) -> torch.Tensor:
    f_l, fp_l, f_u, fp_u = map(_t, (f_l, fp_l, f_u, fp_u))
    _same_shape(f_l, fp_l, "feature_match_loss (labeled)")
    _same_shape(f_u, fp_u, "feature_match_loss (unlabeled)")
    return ((f_l - fp_l) ** 2).mean() + ((f_u - fp_u) ** 2).mean()


def discriminator_loss(score_l, score_u) -> torch.Tensor:
    # labeled -> real (1), unlabeled -> fake (0)
    return bce(score_l, 1) + bce(score_u, 0)


def adversarial_loss(score_l, score_u) -> torch.Tensor:
    # generator side: labels swapped
    return bce(score_l, 0) + bce(score_u, 1)


def single_sided_adversarial_loss(score_u) -> torch.Tensor:
    """Only the unlabeled branch is pushed toward the labeled side."""
    return bce(score_u, 1)


def soft_dice_loss(probs, target) -> torch.Tensor:
    probs, target = _t(probs), _t(target)
    _same_shape(probs, target, "soft_dice_loss")
    target = target.to(probs.dtype)
    if probs.ndim <= 1:  # a single unbatched sample
        probs, target = probs.reshape(1, -1), target.reshape(1, -1)
    dims = tuple(range(1, probs.ndim))
    inter = (probs * target).sum(dim=dims)
    denom = probs.sum(dim=dims) + target.sum(dim=dims)
    return (1 - (2 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


def reconstruction_loss(x, x_rec) -> torch.Tensor:
    x, x_rec = _t(x), _t(x_rec)
    _same_shape(x, x_rec, "reconstruction_loss")
    return ((x - x_rec) ** 2).mean()


def segmentation_objective(lx, ly, lx_rec, lp, ux, ux_rec, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Supervised Dice on the labeled batch plus image-consistency terms on both
    batches. ``ux``/``ux_rec`` may be None when there is no unlabeled batch."""
    rec = reconstruction_loss(lx, lx_rec)
    if ux is not None:
        rec = rec + reconstruction_loss(ux, ux_rec)
    return w.rec * rec + w.dice * soft_dice_loss(lp, ly)
