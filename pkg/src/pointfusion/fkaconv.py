"""Feature-kernel alignment convolution on irregular point sets.

Each point gathers its k nearest neighbors, a small per-neighbor MLP produces
a soft assignment of every neighbor onto K grid-like kernel elements, and the
output is the weighted sum of the aligned features with the kernel weights.
With a hard one-hot assignment on grid-arranged points this degenerates to an
ordinary 3x3 image convolution, which the tests exploit as an oracle.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .geometry import PointCloud, knn_padded


@dataclass
class Neighborhoods:
    """k-neighbor indices and normalized relative offsets for every point.

    rel_coords are (neighbor - center) divided by the largest neighbor
    distance in that neighborhood (or 1 if all neighbors coincide), so each
    row of offsets fits in the unit ball and the center row is zero.
    """

    indices: np.ndarray  # N x k int64
    rel_coords: np.ndarray  # N x k x 3 float32

    @property
    def count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def build_neighborhoods(pc: PointCloud, k: int) -> Neighborhoods:
    """One neighborhood per point; rows are padded when the cloud has < k points."""
    idx = knn_padded(pc, k)
    pts = pc.points.astype(np.float64)
    rel = pts[idx] - pts[:, None, :]
    max_dist = np.linalg.norm(rel, axis=2).max(axis=1)
    scale = np.where(max_dist > 0, max_dist, 1.0)
    rel = rel / scale[:, None, None]
    return Neighborhoods(indices=idx, rel_coords=rel.astype(np.float32))


class AlignmentNet(nn.Module):
    """Per-neighbor MLP (3 -> 16 -> K) with a softmax over kernel elements."""

    def __init__(self, kernel_elements: int, hidden: int = 16):
        super().__init__()
        self.hidden = nn.Linear(3, hidden)
        self.out = nn.Linear(hidden, kernel_elements)

    def forward(self, rel_coords: torch.Tensor) -> torch.Tensor:
        """rel_coords: N x k x 3 -> soft assignment N x k x K, rows sum to 1."""
        logits = self.out(torch.relu(self.hidden(rel_coords)))
        return torch.softmax(logits, dim=-1)


class FKAConv(nn.Module):
    """One feature-kernel alignment convolution layer (C_in x N -> C_out x N)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_elements: int = 9):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_elements = kernel_elements
        self.align = AlignmentNet(kernel_elements)
        self.kernel_weights = nn.Parameter(
            torch.empty(kernel_elements, in_channels, out_channels))
        nn.init.normal_(self.kernel_weights,
                        std=math.sqrt(2.0 / (kernel_elements * in_channels)))

    def forward(self, features: torch.Tensor, nb: Neighborhoods,
                alignment_override: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Convolve per-point features with the aligned kernel.

        Args:
            features: C_in x N feature columns.
            nb: neighborhoods over the same N points.
            alignment_override: optional N x k x K matrix replacing the learned
                soft assignment (used by the grid-degeneracy checks).
        """
        if features.dim() != 2:
            raise ValueError(f"features must be C x N, got {tuple(features.shape)}")
        c_in, n = features.shape
        if c_in != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c_in}")
        if nb.count != n:
            raise ValueError(f"{n} feature columns but {nb.count} neighborhoods")

        idx = torch.as_tensor(nb.indices, dtype=torch.int64, device=features.device)
        if alignment_override is not None:
            m = alignment_override.to(features.dtype)
        else:
            rel = torch.as_tensor(nb.rel_coords, dtype=features.dtype,
                                  device=features.device)
            m = self.align(rel)
        neighbor_feats = features[:, idx]  # C x N x k
        aligned = torch.einsum("nke,cnk->nec", m, neighbor_feats)  # N x K x C_in
        return torch.einsum("nec,eco->on", aligned, self.kernel_weights)


class FKAConvBlock(nn.Module):
    """Two FKAConv layers with a relu in between; channel count preserved."""

    def __init__(self, channels: int, kernel_elements: int = 9):
        super().__init__()
        self.conv1 = FKAConv(channels, channels, kernel_elements)
        self.conv2 = FKAConv(channels, channels, kernel_elements)

    def forward(self, features: torch.Tensor, nb: Neighborhoods) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(features, nb)), nb)
