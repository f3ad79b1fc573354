"""Differentiable dense-array operations used by the network modules.

torch provides the autograd substrate; this module pins the exact semantics
the rest of the code relies on (same-padding convolutions, align-corners=false
upsampling, gather/scatter between grids and point lists) and houses the
finite-difference gradient checker used for verification. Forward/backward
run in float32; the checker runs in float64.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


def _spatial(x: torch.Tensor):
    if x.dim() not in (3, 4):
        raise ValueError(f"expected CxHxW or BxCxHxW tensor, got {tuple(x.shape)}")
    return x.shape[-2], x.shape[-1]


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1) -> torch.Tensor:
    """Same-padded cross-correlation; stride 1 keeps the size, stride 2 halves it."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    h, w = _spatial(x)
    if stride == 2 and (h % 2 or w % 2):
        raise ValueError(f"stride-2 convolution needs even spatial extents, got {h}x{w}")
    kh, kw = weight.shape[-2], weight.shape[-1]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd for same padding")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    out = F.conv2d(x, weight, bias, stride=stride, padding=(kh // 2, kw // 2))
    return out.squeeze(0) if unbatched else out


def upsample_bilinear(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Bilinear upsampling with align_corners=false (constants stay constant)."""
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    out = F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
    return out.squeeze(0) if unbatched else out


def _as_index_tensor(indices, device) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(indices), dtype=torch.int64, device=device)
    if idx.numel() == 0:
        return idx.reshape(0, 2)
    if idx.dim() != 2 or idx.shape[1] != 2:
        raise ValueError(f"indices must be M x 2 (row, col), got {tuple(idx.shape)}")
    return idx


def gather_points(grid: torch.Tensor, indices) -> torch.Tensor:
    """Pick per-point feature columns from a C x H x W grid at (row, col) cells."""
    if grid.dim() != 3:
        raise ValueError(f"grid must be C x H x W, got {tuple(grid.shape)}")
    c, h, w = grid.shape
    idx = _as_index_tensor(indices, grid.device)
    if idx.numel():
        r, col = idx[:, 0], idx[:, 1]
        if r.min() < 0 or col.min() < 0 or r.max() >= h or col.max() >= w:
            raise ValueError("gather index out of bounds")
        flat = r * w + col
    else:
        flat = idx.reshape(0)
    return grid.reshape(c, h * w).index_select(1, flat)


def scatter_points(features: torch.Tensor, indices, height: int, width: int) -> torch.Tensor:
    """Place C x M feature columns into an otherwise-zero C x H x W grid."""
    if features.dim() != 2:
        raise ValueError(f"features must be C x M, got {tuple(features.shape)}")
    c, m = features.shape
    idx = _as_index_tensor(indices, features.device)
    if len(idx) != m:
        raise ValueError(f"{m} feature columns but {len(idx)} indices")
    out = features.new_zeros(c, height * width)
    if m == 0:
        return out.reshape(c, height, width)
    r, col = idx[:, 0], idx[:, 1]
    if r.min() < 0 or col.min() < 0 or r.max() >= height or col.max() >= width:
        raise ValueError("scatter index out of bounds")
    flat = r * width + col
    if len(torch.unique(flat)) != m:
        raise ValueError("duplicate scatter indices; deduplicate upstream")
    out = out.index_copy(1, flat, features)
    return out.reshape(c, height, width)


def batched_matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """B x m x n times B x n x p."""
    if a.dim() != 3 or b.dim() != 3:
        raise ValueError("batched_matmul expects 3D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.bmm(a, b)


# elementwise suite; log gets a domain check, the rest are torch natives
add = torch.add
mul = torch.mul
sigmoid = torch.sigmoid
relu = torch.relu
tensor_abs = torch.abs
tensor_sum = torch.sum
tensor_mean = torch.mean


def log(x: torch.Tensor) -> torch.Tensor:
    if (x <= 0).any():
        raise ValueError("log of a non-positive value")
    return torch.log(x)


def assert_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return x


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-3

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def worst(self, n: int = 5) -> List[GradCheckEntry]:
        return sorted(self.entries, key=lambda e: -e.max_rel_error)[:n]


def grad_check(f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = 1e-3, tol: float = 1e-3,
               max_entries_per_input: Optional[int] = None, seed: int = 0,
               names: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare autograd gradients of a scalar function against central differences.

    `inputs` must be the exact float64 leaf tensors that `f` reads (they may
    also be captured in f's closure, e.g. module parameters). Large tensors
    can be spot-checked by capping `max_entries_per_input`; coordinates are
    drawn deterministically from `seed`. The reported relative error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.requires_grad:
            t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None

    out = f(*inputs)
    if out.dim() != 0:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for t in inputs]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for i, t in enumerate(inputs):
        numel = t.numel()
        name = names[i] if names else f"input{i}"
        if numel == 0:
            report.entries.append(GradCheckEntry(name, 0.0, 0, True))
            continue
        if max_entries_per_input is not None and numel > max_entries_per_input:
            coords = rng.choice(numel, size=max_entries_per_input, replace=False)
        else:
            coords = np.arange(numel)
        flat = t.data.reshape(-1)
        grad_flat = analytic[i].reshape(-1)
        worst = 0.0
        with torch.no_grad():
            for j in coords:
                j = int(j)
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = float(f(*inputs))
                flat[j] = orig - eps
                f_minus = float(f(*inputs))
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(grad_flat[j])
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, rel)
        report.entries.append(GradCheckEntry(name, worst, len(coords), worst <= tol))
    return report
