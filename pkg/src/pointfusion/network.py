"""Multi-scale 2D/3D fusion model for sparse-point-guided depth estimation.

The stem turns the RGB image and the projected sparse depth into low-level
features, a strided path produces skip features down to the coarsest scale,
and a cascade of Fusion-Nets runs coarse to fine. Every stage fuses a
two-resolution 2D branch with a point-convolution branch, predicts a
per-pixel confidence map, and emits a depth map at its native resolution;
the finest stage's outputs are the model prediction.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ops
from .fkaconv import FKAConvBlock, Neighborhoods, build_neighborhoods
from .geometry import (CameraIntrinsics, PointCloud, SparseDepthMap,
                       normalize_unit_sphere, project_points, rescale_indices)


@dataclass(frozen=True)
class FusionConfig:
    """Architecture hyperparameters; channels are listed coarse to fine."""

    num_fusion_nets: int = 5
    channels: Tuple[int, ...] = (32, 64, 128, 128, 128)
    stem_channels: int = 64  # width of each stem branch; stem output is twice this
    knn_k: int = 9
    kernel_elements: int = 9
    use_confidence: bool = True
    use_3d_branch: bool = True
    base_image_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not 2 <= self.num_fusion_nets <= 6:
            raise ValueError(f"num_fusion_nets must be in [2, 6], got {self.num_fusion_nets}")
        if len(self.channels) != self.num_fusion_nets:
            raise ValueError(
                f"need {self.num_fusion_nets} channel widths, got {len(self.channels)}")
        if any(c < 1 for c in self.channels) or self.stem_channels < 1:
            raise ValueError("channel widths must be positive")
        if self.knn_k < 1 or self.kernel_elements < 1:
            raise ValueError("knn_k and kernel_elements must be positive")
        h, w = self.base_image_size
        d = self.min_divisor
        if h % d or w % d:
            raise ValueError(
                f"image size {h}x{w} must be divisible by {d} "
                f"(coarsest scale must keep even extents)")

    @property
    def min_divisor(self) -> int:
        # one factor of two per inter-scale step plus one so the coarsest
        # feature map stays even for the stride-2 encoder branch
        return 2 ** self.num_fusion_nets

    def scale_factor(self, scale: int) -> int:
        """Downscale factor of scale `scale` (0 = coarsest)."""
        return 2 ** (self.num_fusion_nets - 1 - scale)


@dataclass
class DepthEstimate:
    """Model prediction for one image."""

    depth: np.ndarray  # H x W, positive
    confidence: np.ndarray  # H x W in [0, 1]
    per_scale_depths: List[np.ndarray]  # coarse -> fine, native resolutions


@dataclass
class ScalePoints:
    """Surviving points of one sample at one scale, ready for the 3D branch."""

    indices: np.ndarray  # M x 2 occupied cells
    neighborhoods: Neighborhoods


@dataclass
class SamplePoints:
    """Per-scale point data for one sample (entries are None when empty)."""

    scales: List[Optional[ScalePoints]] = field(default_factory=list)


@dataclass
class NetworkOutput:
    depth: torch.Tensor  # B x 1 x H x W
    confidence: Optional[torch.Tensor]  # B x 1 x H x W or None
    scale_depths: List[torch.Tensor]  # coarse -> fine


class Conv(nn.Module):
    """3x3 same-padded convolution parameterized explicitly (torch-style init)."""

    def __init__(self, in_channels, out_channels, stride=1, kernel_size=3):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride)


class Stem(nn.Module):
    """Two convs on the sparse depth alone, two on the RGBD stack, concatenated."""

    def __init__(self, width: int):
        super().__init__()
        self.sparse1 = Conv(1, width)
        self.sparse2 = Conv(width, width)
        self.rgbd1 = Conv(4, width)
        self.rgbd2 = Conv(width, width)

    def forward(self, rgb: torch.Tensor, sparse_depth: torch.Tensor) -> torch.Tensor:
        if rgb.shape[-2:] != sparse_depth.shape[-2:]:
            raise ValueError(
                f"rgb {tuple(rgb.shape)} and sparse depth {tuple(sparse_depth.shape)} "
                "spatial sizes differ")
        s = torch.relu(self.sparse2(torch.relu(self.sparse1(sparse_depth))))
        rgbd = torch.cat([rgb, sparse_depth], dim=-3)
        r = torch.relu(self.rgbd2(torch.relu(self.rgbd1(rgbd))))
        return torch.cat([s, r], dim=-3)


class DownBlock(nn.Module):
    """Stride-2 conv + stride-1 conv, halving resolution along the skip path."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.down = Conv(in_channels, out_channels, stride=2)
        self.conv = Conv(out_channels, out_channels)

    def forward(self, x):
        return torch.relu(self.conv(torch.relu(self.down(x))))


class FusionNet(nn.Module):
    """One cascade stage: fusion encoder, confidence predictor, decoder, refinement."""

    def __init__(self, channels: int, kernel_elements: int,
                 use_confidence: bool, use_3d_branch: bool):
        super().__init__()
        c = channels
        self.conv_a = Conv(c, c)
        self.conv_b1 = Conv(c, c, stride=2)
        self.conv_b2 = Conv(c, c)
        self.conv_fuse = Conv(c, c)
        self.point_block = FKAConvBlock(c, kernel_elements) if use_3d_branch else None
        if use_confidence:
            self.conf1 = Conv(c, c)
            self.conf2 = Conv(c, c)
            self.conf3 = Conv(c, 1)
        else:
            self.conf1 = self.conf2 = self.conf3 = None
        self.dec1 = Conv(c, c)
        self.dec2 = Conv(c, c)
        self.dec_head = Conv(c, 1)
        self.ref1 = Conv(c + 1, c)
        self.ref2 = Conv(c, c)
        self.ref_head = Conv(c, 1)

    def encode(self, x: torch.Tensor,
               points: Sequence[Optional[ScalePoints]]) -> torch.Tensor:
        """Fuse the two 2D resolutions with the 3D point branch, residually."""
        a = torch.relu(self.conv_a(x))
        b = torch.relu(self.conv_b2(torch.relu(self.conv_b1(x))))
        two_d = a + ops.upsample_bilinear(b, 2)
        fused = two_d
        if self.point_block is not None:
            three_d = self._point_branch(x, points)
            if three_d is not None:
                fused = two_d + three_d
        return self.conv_fuse(fused) + x

    def _point_branch(self, x: torch.Tensor,
                      points: Sequence[Optional[ScalePoints]]) -> Optional[torch.Tensor]:
        h, w = x.shape[-2:]
        if all(p is None for p in points):
            return None
        outs = []
        for b, p in enumerate(points):
            if p is None:
                outs.append(x.new_zeros(x.shape[-3], h, w))
                continue
            gathered = ops.gather_points(x[b], p.indices)
            convolved = self.point_block(gathered, p.neighborhoods)
            outs.append(ops.scatter_points(convolved, p.indices, h, w))
        return torch.stack(outs, dim=0)

    def confidence(self, encoded: torch.Tensor) -> Optional[torch.Tensor]:
        if self.conf1 is None:
            return None
        c = torch.relu(self.conf1(encoded))
        c = torch.relu(self.conf2(c))
        return torch.sigmoid(self.conf3(c))

    def decode_refine(self, encoded: torch.Tensor,
                      confidence: Optional[torch.Tensor]):
        """Decoder + confidence rectification + refinement; depth is softplus-positive."""
        feats = self.dec2(torch.relu(self.dec1(encoded)))
        depth_init = self.dec_head(feats)
        if confidence is not None:
            feats = feats * confidence + feats
            depth_init = depth_init * confidence + depth_init
        r = self.ref2(torch.relu(self.ref1(torch.cat([feats, depth_init], dim=-3))))
        r = r + feats
        depth = F.softplus(self.ref_head(r))
        return r, depth

    def forward(self, x: torch.Tensor, points: Sequence[Optional[ScalePoints]]):
        encoded = self.encode(x, points)
        conf = self.confidence(encoded)
        feats, depth = self.decode_refine(encoded, conf)
        return feats, depth, conf


class PointFusionNet(nn.Module):
    """The full cascade; forward works on any size divisible by config.min_divisor."""

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        n = config.num_fusion_nets
        ch = config.channels
        self.stem = Stem(config.stem_channels)
        self.entry = Conv(2 * config.stem_channels, ch[-1])
        # skip path, finest to coarsest: down[i] maps scale n-1-i to scale n-2-i
        self.down = nn.ModuleList(
            [DownBlock(ch[s + 1], ch[s]) for s in range(n - 2, -1, -1)])
        self.transitions = nn.ModuleList(
            [Conv(ch[s - 1], ch[s]) for s in range(1, n)])
        self.stages = nn.ModuleList([
            FusionNet(ch[s], config.kernel_elements,
                      config.use_confidence, config.use_3d_branch)
            for s in range(n)
        ])

    def _check_size(self, h, w):
        d = self.config.min_divisor
        if h % d or w % d:
            raise ValueError(f"input size {h}x{w} not divisible by {d}")

    def forward(self, rgb: torch.Tensor, sparse_depth: torch.Tensor,
                points: Optional[Sequence[SamplePoints]] = None) -> NetworkOutput:
        """rgb: B x 3 x H x W in [0,1]; sparse_depth: B x 1 x H x W (0 = missing)."""
        if rgb.dim() != 4 or sparse_depth.dim() != 4:
            raise ValueError("forward expects batched B x C x H x W tensors")
        batch, _, h, w = rgb.shape
        self._check_size(h, w)
        n = self.config.num_fusion_nets
        if points is None:
            points = [SamplePoints(scales=[None] * n) for _ in range(batch)]
        if len(points) != batch:
            raise ValueError(f"{batch} images but point data for {len(points)}")

        x = torch.relu(self.entry(self.stem(rgb, sparse_depth)))
        skips = [None] * n
        skips[n - 1] = x
        for i, block in enumerate(self.down):
            x = block(x)
            skips[n - 2 - i] = x

        scale_depths: List[torch.Tensor] = []
        conf = None
        feats = None
        for s in range(n):
            stage_points = [sp.scales[s] for sp in points]
            if s == 0:
                stage_in = skips[0]
            else:
                up = ops.upsample_bilinear(feats, 2)
                stage_in = torch.relu(self.transitions[s - 1](up)) + skips[s]
            feats, depth, conf = self.stages[s](stage_in, stage_points)
            scale_depths.append(depth)

        ops.assert_finite(scale_depths[-1], "depth output")
        if conf is not None:
            ops.assert_finite(conf, "confidence output")
        return NetworkOutput(depth=scale_depths[-1], confidence=conf,
                             scale_depths=scale_depths)


def prepare_sample_points(sparse: SparseDepthMap, cloud: PointCloud,
                          config: FusionConfig) -> SamplePoints:
    """Rescale occupied cells to every stage resolution and build neighborhoods.

    The cloud is unit-sphere normalized once; each scale keeps the subset of
    points that survive its collision resolution.
    """
    n = config.num_fusion_nets
    if cloud.count == 0 or sparse.occupied == 0:
        return SamplePoints(scales=[None] * n)
    normalized, _ = normalize_unit_sphere(cloud)
    scales: List[Optional[ScalePoints]] = []
    for s in range(n):
        sparse_s = rescale_indices(sparse, config.scale_factor(s))
        if sparse_s.occupied == 0:
            scales.append(None)
            continue
        cloud_s = normalized.subset(sparse_s.point_index)
        nb = build_neighborhoods(cloud_s, config.knn_k)
        scales.append(ScalePoints(indices=sparse_s.indices, neighborhoods=nb))
    return SamplePoints(scales=scales)


def predict(model: PointFusionNet, rgb: np.ndarray, cloud: PointCloud,
            intrinsics: CameraIntrinsics) -> DepthEstimate:
    """Run one image through the model and return numpy maps.

    Projects the cloud to the sparse depth input; an empty cloud runs the
    pure monocular path. The confidence map defaults to ones when the model
    was built without the confidence predictor.
    """
    sparse = project_points(cloud, intrinsics)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    rgb_t = torch.as_tensor(rgb, dtype=dtype, device=device).unsqueeze(0)
    sparse_t = torch.as_tensor(sparse.depth, dtype=dtype, device=device)
    sparse_t = sparse_t.unsqueeze(0).unsqueeze(0)
    sample_points = prepare_sample_points(sparse, cloud, model.config)
    with torch.no_grad():
        out = model(rgb_t, sparse_t, [sample_points])
    h, w = rgb.shape[-2:]
    if out.confidence is not None:
        confidence = out.confidence[0, 0].cpu().numpy()
    else:
        confidence = np.ones((h, w), dtype=np.float32)
    return DepthEstimate(
        depth=out.depth[0, 0].cpu().numpy(),
        confidence=confidence,
        per_scale_depths=[d[0, 0].cpu().numpy() for d in out.scale_depths],
    )


def count_parameters(model: nn.Module) -> int:
    """Total number of scalar values across all registered parameters."""
    return sum(p.numel() for p in model.parameters())
