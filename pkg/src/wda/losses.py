"""Training objectives. All functions take torch tensors and reduce to a scalar.

Grids are batched as B x C x H x W (or B x H x W for single-channel maps);
reductions are a pixel mean inside each image followed by a batch mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass
class LossWeights:
    lambda_a: float = 1e-3
    lambda_d: float = 1e-1
    lambda_focus: float = 3.0
    epsilon: float = 3.0
    rho: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def lambda_c(z: int, z_max: int) -> float:
    """Linear decay of the counting weight, clamped at zero past z_max."""
    if z_max <= 0:
        return 0.0
    return max(0.0, 1.0 - z / z_max)


def _per_image_mean(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).mean(dim=1)


def _check_finite(*ts):
    for t in ts:
        if t is not None and not torch.isfinite(t).all():
            raise ValueError("non-finite values in loss input")


def _ce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # per-pixel cross-entropy, B x H x W
    return -(y * torch.log(p.clamp(EPS, 1 - EPS))).sum(dim=1)


def seg_loss(p_s, y_s, p_t=None, yhat_t=None) -> torch.Tensor:
    """Cross-entropy on source labels plus partial cross-entropy on target pseudo-labels.

    ``y_s`` and ``yhat_t`` are one-hot B x 2 x H x W; all-zero target pixels are
    ignored and an image without labeled pixels contributes zero.
    """
    _check_finite(p_s, p_t)
    loss = (p_s if p_s is not None else p_t).new_zeros(())
    if p_s is not None:
        loss = loss + _per_image_mean(_ce(p_s, y_s)).mean()
    if p_t is not None and yhat_t is not None:
        labeled = yhat_t.sum(dim=1)
        n = labeled.reshape(labeled.shape[0], -1).sum(dim=1)
        s = _ce(p_t, yhat_t).reshape(labeled.shape[0], -1).sum(dim=1)
        per_img = torch.where(n > 0, s / n.clamp(min=1), torch.zeros_like(s))
        loss = loss + per_img.mean()
    return loss


def detection_loss(hhat_s=None, h_s=None, beta_s=None, hhat_t=None, hbar_t=None, w_t=None,
                   beta_t=None, lambda_focus: float = 3.0) -> torch.Tensor:
    """Focus-weighted heatmap regression; target pixels are weighted by w + lambda*beta."""
    for t in (beta_s, w_t, beta_t):
        if t is not None and (t < 0).any():
            raise ValueError("detection weights must be non-negative")
    if lambda_focus < 0:
        raise ValueError("lambda_focus must be non-negative")
    ref = hhat_s if hhat_s is not None else hhat_t
    loss = ref.new_zeros(())
    if hhat_s is not None:
        loss = loss + _per_image_mean((1 + lambda_focus * beta_s) * (hhat_s - h_s) ** 2).mean()
    if hhat_t is not None:
        loss = loss + _per_image_mean((w_t + lambda_focus * beta_t) * (hhat_t - hbar_t) ** 2).mean()
    return loss


def _check_prob(t: torch.Tensor):
    if not torch.isfinite(t).all() or (t < 0).any() or (t > 1).any():
        raise ValueError("discriminator outputs must be probabilities in [0, 1]")


def discriminator_loss(d_ps: torch.Tensor, d_pt: torch.Tensor) -> torch.Tensor:
    """Source predictions are labeled 1, target predictions 0."""
    _check_prob(d_ps)
    _check_prob(d_pt)
    return (-torch.log(d_ps.clamp(EPS, 1 - EPS)).mean()
            - torch.log((1 - d_pt).clamp(EPS, 1 - EPS)).mean())


def adversarial_loss(d_pt: torch.Tensor) -> torch.Tensor:
    _check_prob(d_pt)
    return -torch.log(d_pt.clamp(EPS, 1 - EPS)).mean()


def counting_consistency(t_hat, t, epsilon: float = 3.0):
    """Hinge that is zero while the predicted count stays within epsilon of the prior count."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    t_hat = torch.as_tensor(t_hat)
    t = torch.as_tensor(t, dtype=t_hat.dtype)
    per = torch.relu(t_hat - (t + epsilon)) + torch.relu((t - epsilon) - t_hat)
    return per.mean()


def total_generator_loss(parts: dict, weights: LossWeights, z: int, z_max: int):
    """Weighted sum of the generator objectives with the decaying counting weight.

    ``parts`` maps ``seg``, ``adv``, ``det`` and ``cons`` to scalar losses;
    missing entries count as zero.
    """
    zero = 0.0
    return (parts.get("seg", zero)
            + weights.lambda_a * parts.get("adv", zero)
            + weights.lambda_d * parts.get("det", zero)
            + lambda_c(z, z_max) * parts.get("cons", zero))
