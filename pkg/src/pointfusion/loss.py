"""Multi-scale training objective: log-L1, gradient and surface-normal terms.

Every term is a mean over valid ground-truth pixels (or valid forward-difference
pairs) and is exactly zero for a perfect prediction; the gradient and normal
terms are also invariant to constant depth offsets. The total is a weighted
sum over the cascade's scales, finest scale weighted highest.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch

DEFAULT_GAMMA = (1.0, 0.75, 0.5, 0.25, 0.125)  # finest scale first


@dataclass(frozen=True)
class LossWeights:
    """Per-scale weights (fine to coarse) and term coefficients."""

    gamma: Tuple[float, ...] = DEFAULT_GAMMA
    mu: float = 1.0
    theta: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if any(g <= 0 for g in self.gamma) or self.mu <= 0 or self.theta <= 0:
            raise ValueError("loss weights must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def for_scales(self, n: int) -> "LossWeights":
        if len(self.gamma) < n:
            raise ValueError(f"have {len(self.gamma)} scale weights, need {n}")
        return LossWeights(gamma=self.gamma[:n], mu=self.mu,
                           theta=self.theta, alpha=self.alpha)


def _check_mask(mask: torch.Tensor, what: str):
    if not mask.any():
        raise ValueError(f"{what}: no valid pixels in mask")


def l_log(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor,
          alpha: float = 0.5) -> torch.Tensor:
    """Log-damped L1: mean of ln(|pred - gt| + alpha) - ln(alpha) over the mask."""
    _check_mask(mask, "l_log")
    err = torch.abs(pred - gt)[mask]
    return (torch.log(err + alpha) - torch.log(torch.as_tensor(
        alpha, dtype=pred.dtype, device=pred.device))).mean()


def l_grad(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean L1 of forward-difference gradients of (pred - gt) over valid pairs."""
    diff = pred - gt
    dx = diff[..., :, 1:] - diff[..., :, :-1]
    dy = diff[..., 1:, :] - diff[..., :-1, :]
    valid_x = mask[..., :, 1:] & mask[..., :, :-1]
    valid_y = mask[..., 1:, :] & mask[..., :-1, :]
    n_pairs = int(valid_x.sum()) + int(valid_y.sum())
    if n_pairs == 0:
        raise ValueError("l_grad: no valid forward-difference pairs")
    total = dx.abs()[valid_x].sum() + dy.abs()[valid_y].sum()
    return total / n_pairs


def _normals(depth: torch.Tensor) -> torch.Tensor:
    """Unit surface normals (-dz/dx, -dz/dy, 1) from forward differences.

    Returned for the (H-1) x (W-1) grid of pixels that own both differences.
    """
    dzdx = depth[..., :-1, 1:] - depth[..., :-1, :-1]
    dzdy = depth[..., 1:, :-1] - depth[..., :-1, :-1]
    ones = torch.ones_like(dzdx)
    n = torch.stack([-dzdx, -dzdy, ones], dim=-1)
    return n / n.norm(dim=-1, keepdim=True)


def l_norm(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean angular mismatch 1 - <n_pred, n_gt> between surface normals."""
    valid = mask[..., :-1, :-1] & mask[..., :-1, 1:] & mask[..., 1:, :-1]
    if not valid.any():
        raise ValueError("l_norm: no pixels with both forward differences valid")
    np_ = _normals(pred)
    ng = _normals(gt)
    dots = (np_ * ng).sum(dim=-1)
    return (1.0 - dots)[valid].mean()


def downsample_gt(gt: torch.Tensor, mask: torch.Tensor, factor: int):
    """Valid-aware average pooling: invalid pixels never contaminate a window."""
    if factor == 1:
        return gt, mask
    h, w = gt.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {h}x{w}")
    shape = gt.shape[:-2] + (h // factor, factor, w // factor, factor)
    gt_win = (gt * mask).reshape(shape)
    count = mask.to(gt.dtype).reshape(shape)
    sums = gt_win.sum(dim=(-3, -1))
    counts = count.sum(dim=(-3, -1))
    out_mask = counts > 0
    out = torch.where(out_mask, sums / counts.clamp(min=1), torch.zeros_like(sums))
    return out, out_mask


def gt_pyramid(gt: torch.Tensor, mask: torch.Tensor, num_scales: int):
    """Ground truth at every cascade scale, coarse to fine."""
    levels = []
    for s in range(num_scales):
        factor = 2 ** (num_scales - 1 - s)
        levels.append(downsample_gt(gt, mask, factor))
    return levels


def total_loss(scale_depths: Sequence[torch.Tensor], gt: torch.Tensor,
               mask: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the per-scale composites over the cascade.

    scale_depths are ordered coarse to fine as the network emits them; the
    first gamma entry weights the finest scale.
    """
    n = len(scale_depths)
    weights = weights.for_scales(n)
    levels = gt_pyramid(gt, mask, n)
    total = None
    for s, pred in enumerate(scale_depths):
        gt_s, mask_s = levels[s]
        if pred.shape[-2:] != gt_s.shape[-2:]:
            raise ValueError(
                f"scale {s}: prediction {tuple(pred.shape[-2:])} does not match "
                f"ground truth {tuple(gt_s.shape[-2:])}")
        composite = (l_log(pred, gt_s, mask_s, weights.alpha)
                     + weights.mu * l_grad(pred, gt_s, mask_s)
                     + weights.theta * l_norm(pred, gt_s, mask_s))
        gamma = weights.gamma[n - 1 - s]
        term = gamma * composite
        total = term if total is None else total + term
    return total
