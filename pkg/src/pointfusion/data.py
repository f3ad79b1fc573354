"""Dataset ingestion, synthetic scenes, point sampling and augmentation.

Synthetic scenes are rendered analytically (per-pixel nearest surface along
the ray), so their ground truth is exact and deterministic per seed. Depths
are kept in normalized scene units within (0, 1].
"""

import os
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import (CameraIntrinsics, PointCloud, load_point_file)


class DataFileError(ValueError):
    """Raised when a dataset file fails to parse."""


@dataclass
class Sample:
    """One training/evaluation item: image, exact depth, guidance points."""

    rgb: np.ndarray  # 3 x H x W float32 in [0, 1]
    gt_depth: np.ndarray  # H x W float32
    gt_mask: np.ndarray  # H x W bool
    cloud: PointCloud
    intrinsics: CameraIntrinsics
    id: str

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.gt_depth = np.asarray(self.gt_depth, dtype=np.float32)
        self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be 3 x H x W, got {self.rgb.shape}")
        h, w = self.rgb.shape[1:]
        if self.gt_depth.shape != (h, w) or self.gt_mask.shape != (h, w):
            raise ValueError("depth/mask spatial size does not match rgb")
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise ValueError("intrinsics size does not match image size")
        if not self.gt_mask.any():
            raise ValueError("sample has no valid ground-truth pixels")
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb values must lie in [0, 1]")
        if (self.gt_depth[self.gt_mask] <= 0).any():
            raise ValueError("valid ground-truth depths must be positive")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gt_depth.shape


@dataclass(frozen=True)
class SamplingSpec:
    """How to draw guidance points from the dense ground truth."""

    pattern: str = "random"  # random | feature-like | external-file
    count: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("random", "feature-like", "external-file"):
            raise ValueError(f"unknown sampling pattern {self.pattern!r}")
        if self.count < 0:
            raise ValueError("count must be non-negative")


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    """Pinhole defaults used when a dataset declares no camera model."""
    f = 0.8 * max(height, width)
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(image.astype(np.float64))
    return np.hypot(gx, gy)


def sample_points(gt_depth: np.ndarray, gt_mask: np.ndarray,
                  intrinsics: CameraIntrinsics, spec: SamplingSpec,
                  rgb: Optional[np.ndarray] = None,
                  rng: Optional[np.random.Generator] = None) -> PointCloud:
    """Draw guidance points from valid pixels and back-project them to 3D.

    'random' samples uniformly without replacement; 'feature-like' weights
    pixels by local image-gradient magnitude (of the rgb when given, else of
    the depth itself), mimicking points that cluster on texture. The result
    is bitwise reproducible for a given spec.seed.
    """
    if spec.pattern == "external-file":
        raise ValueError("external-file points are ingested, not sampled")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    valid = np.argwhere(gt_mask)
    if spec.count > len(valid):
        raise ValueError(f"requested {spec.count} points but only "
                         f"{len(valid)} valid pixels")
    if spec.count == 0:
        return PointCloud(np.zeros((0, 3), dtype=np.float32))

    if spec.pattern == "random":
        chosen = valid[rng.choice(len(valid), size=spec.count, replace=False)]
    else:
        source = np.mean(rgb, axis=0) if rgb is not None else gt_depth
        weights = _gradient_magnitude(source)[valid[:, 0], valid[:, 1]] + 1e-12
        p = weights / weights.sum()
        chosen = valid[rng.choice(len(valid), size=spec.count, replace=False, p=p)]

    rows = chosen[:, 0].astype(np.float64)
    cols = chosen[:, 1].astype(np.float64)
    z = gt_depth[chosen[:, 0], chosen[:, 1]].astype(np.float64)
    x = (cols - intrinsics.cx) * z / intrinsics.fx
    y = (rows - intrinsics.cy) * z / intrinsics.fy
    return PointCloud(np.stack([x, y, z], axis=1).astype(np.float32))


def jitter_points_along_ray(cloud: PointCloud, sigma: float,
                            rng: np.random.Generator) -> PointCloud:
    """Scale each point along its camera ray by 1 + sigma * N(0, 1).

    Keeps the projected pixel fixed while perturbing the measured depth,
    which models noisy reconstruction output.
    """
    if cloud.count == 0 or sigma == 0:
        return cloud
    factors = 1.0 + sigma * rng.standard_normal(cloud.count)
    factors = np.clip(factors, 0.05, None)
    return PointCloud((cloud.points.astype(np.float64)
                       * factors[:, None]).astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic scenes


def synthesize_scene(seed: int, size: Tuple[int, int] = (64, 64),
                     num_points: int = 0) -> Sample:
    """Procedural scene of 3-8 textured planes and spheres over a background.

    Depth is the per-pixel minimum over analytic surfaces, so occlusion
    ordering is exact. Optionally attaches `num_points` randomly sampled
    guidance points.
    """
    h, w = size
    rng = np.random.default_rng(seed)
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    un = uu / max(w - 1, 1)
    vn = vv / max(h - 1, 1)

    # tilted background plane
    depth = (rng.uniform(0.75, 0.9)
             + rng.uniform(-0.15, 0.15) * (un - 0.5)
             + rng.uniform(-0.15, 0.15) * (vn - 0.5))
    owner = np.zeros((h, w), dtype=np.int64)

    n_objects = int(rng.integers(3, 9))
    for obj in range(1, n_objects + 1):
        kind = rng.choice(["plane", "sphere"])
        z0 = rng.uniform(0.25, 0.7)
        cu, cv = rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)
        if kind == "plane":
            hu, hv = rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3)
            inside = (np.abs(un - cu) <= hu) & (np.abs(vn - cv) <= hv)
            z = z0 + rng.uniform(-0.2, 0.2) * (un - cu) + rng.uniform(-0.2, 0.2) * (vn - cv)
        else:
            radius = rng.uniform(0.08, 0.2)
            rho2 = (un - cu) ** 2 + (vn - cv) ** 2
            inside = rho2 <= radius ** 2
            bulge = np.sqrt(np.clip(1.0 - rho2 / radius ** 2, 0.0, 1.0))
            z = z0 - 0.08 * bulge
        closer = inside & (z < depth)
        depth = np.where(closer, z, depth)
        owner = np.where(closer, obj, owner)

    depth = np.clip(depth, 0.05, 1.0)

    # per-object base color + sinusoidal texture
    rgb = np.zeros((3, h, w), dtype=np.float64)
    for obj in range(n_objects + 1):
        region = owner == obj
        if not region.any():
            continue
        base = rng.uniform(0.2, 0.85, size=3)
        freq_u, freq_v = rng.uniform(2, 10, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex = 0.12 * np.sin(2 * np.pi * (freq_u * un + freq_v * vn) + phase)
        for c in range(3):
            rgb[c][region] = base[c] + tex[region]
    rgb += 0.15 * (1.0 - depth)[None]  # mild depth shading
    rgb = np.clip(rgb, 0.0, 1.0)

    intr = default_intrinsics(h, w)
    sample = Sample(rgb=rgb.astype(np.float32),
                    gt_depth=depth.astype(np.float32),
                    gt_mask=np.ones((h, w), dtype=bool),
                    cloud=PointCloud(np.zeros((0, 3), dtype=np.float32)),
                    intrinsics=intr, id=f"synthetic-{seed}")
    if num_points:
        spec = SamplingSpec(pattern="random", count=num_points, seed=seed)
        cloud = sample_points(sample.gt_depth, sample.gt_mask, intr, spec,
                              rgb=sample.rgb)
        sample = replace(sample, cloud=cloud)
    return sample


def synthetic_dataset(count: int, size: Tuple[int, int] = (64, 64),
                      base_seed: int = 0) -> List[Sample]:
    return [synthesize_scene(base_seed + i, size) for i in range(count)]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    flip: bool = False
    drop_rect: Optional[Tuple[int, int, int, int]] = None  # row, col, height, width
    brightness: float = 1.0
    contrast: float = 1.0


def draw_augment_params(shape: Tuple[int, int], seed: int) -> AugmentParams:
    """Rotation in [-5, +5] degrees, flip with p=0.5, rgb window drop <= 25%
    of the area, brightness/contrast jitter within 10%."""
    h, w = shape
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(-5.0, 5.0))
    flip = bool(rng.random() < 0.5)
    dh = int(rng.uniform(0.1, 0.5) * h)
    dw = int(rng.uniform(0.1, 0.5) * w)
    r0 = int(rng.integers(0, max(h - dh, 1)))
    c0 = int(rng.integers(0, max(w - dw, 1)))
    brightness = float(rng.uniform(0.9, 1.1))
    contrast = float(rng.uniform(0.9, 1.1))
    return AugmentParams(angle_deg=angle, flip=flip, drop_rect=(r0, c0, dh, dw),
                         brightness=brightness, contrast=contrast)


def _rotate(rgb: np.ndarray, depth: np.ndarray, mask: np.ndarray, angle_deg: float):
    """Rotate jointly around the image center; rgb bilinear, depth nearest.

    Pixels whose source falls outside the image become invalid.
    """
    h, w = depth.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    x = cc - cx
    y = rr - cy
    src_x = cos_t * x + sin_t * y + cx
    src_y = -sin_t * x + cos_t * y + cy
    in_bounds = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)

    x0 = np.clip(np.floor(src_x).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(src_y).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(src_x - x0, 0.0, 1.0)
    fy = np.clip(src_y - y0, 0.0, 1.0)
    rgb_out = np.zeros_like(rgb)
    for c in range(rgb.shape[0]):
        plane = rgb[c].astype(np.float64)
        interp = (plane[y0, x0] * (1 - fx) * (1 - fy) + plane[y0, x1] * fx * (1 - fy)
                  + plane[y1, x0] * (1 - fx) * fy + plane[y1, x1] * fx * fy)
        rgb_out[c] = np.where(in_bounds, interp, 0.0).astype(np.float32)

    rn = np.clip(np.rint(src_y).astype(np.int64), 0, h - 1)
    cn = np.clip(np.rint(src_x).astype(np.int64), 0, w - 1)
    mask_out = in_bounds & mask[rn, cn]
    depth_out = np.where(mask_out, depth[rn, cn], 0.0).astype(np.float32)
    return rgb_out, depth_out, mask_out


def _flip_cloud(cloud: PointCloud, intr: CameraIntrinsics) -> PointCloud:
    """Mirror point x-coordinates consistently with a horizontal image flip.

    Points are assumed to lie on pixel rays (as sampled points do); each is
    re-anchored to the mirrored pixel column.
    """
    if cloud.count == 0:
        return cloud
    pts = cloud.points.astype(np.float64)
    u = np.rint(intr.fx * pts[:, 0] / pts[:, 2] + intr.cx)
    u_flipped = (intr.width - 1) - u
    x_new = (u_flipped - intr.cx) * pts[:, 2] / intr.fx
    return PointCloud(np.stack([x_new, pts[:, 1], pts[:, 2]], axis=1).astype(np.float32))


def augment_with_params(sample: Sample, params: AugmentParams,
                        sampling: Optional[SamplingSpec] = None) -> Sample:
    """Apply a fixed augmentation. Rotation invalidates pixel-anchored points,
    so the cloud is re-sampled from the rotated ground truth when a sampling
    spec is given (and dropped otherwise); a pure flip mirrors the cloud."""
    rgb, depth, mask = sample.rgb, sample.gt_depth, sample.gt_mask
    cloud = sample.cloud
    rotated = params.angle_deg != 0.0
    if rotated:
        rgb, depth, mask = _rotate(rgb, depth, mask, params.angle_deg)
    if params.flip:
        rgb = rgb[:, :, ::-1].copy()
        depth = depth[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
        if not rotated:
            cloud = _flip_cloud(cloud, sample.intrinsics)
    if rotated:
        if sampling is not None and sampling.count > 0 and mask.any():
            count = min(sampling.count, int(mask.sum()))
            cloud = sample_points(depth, mask, sample.intrinsics,
                                  replace(sampling, count=count), rgb=rgb)
        else:
            cloud = PointCloud(np.zeros((0, 3), dtype=np.float32))

    if params.drop_rect is not None:
        r0, c0, dh, dw = params.drop_rect
        rgb = rgb.copy()
        rgb[:, r0:r0 + dh, c0:c0 + dw] = 0.0

    if params.brightness != 1.0 or params.contrast != 1.0:
        rgb = rgb * params.brightness
        mean = rgb.mean()
        rgb = (rgb - mean) * params.contrast + mean
        rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)

    return replace(sample, rgb=np.ascontiguousarray(rgb),
                   gt_depth=np.ascontiguousarray(depth),
                   gt_mask=np.ascontiguousarray(mask), cloud=cloud)


def augment(sample: Sample, seed: int,
            sampling: Optional[SamplingSpec] = None) -> Sample:
    """Random augmentation, deterministic per seed."""
    return augment_with_params(sample, draw_augment_params(sample.shape, seed),
                               sampling=sampling)


# ---------------------------------------------------------------------------
# file formats

FLOAT_MAP_MAGIC = b"floatmap"


def save_float_map(path, values: np.ndarray, scale: float = 1.0) -> None:
    """Text header (magic, width/height, scale) + float32 LE rows, bottom-up."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("float map must be 2D")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(FLOAT_MAP_MAGIC + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale:.9g}\n".encode())
        f.write(np.ascontiguousarray(values[::-1]).tobytes())


def load_float_map(path) -> Tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(FLOAT_MAP_MAGIC + b"\n"):
        raise DataFileError(f"{path}: missing float map magic")
    try:
        first = data.index(b"\n")
        second = data.index(b"\n", first + 1)
        third = data.index(b"\n", second + 1)
        w, h = (int(t) for t in data[first + 1:second].split())
        scale = float(data[second + 1:third])
    except (ValueError, IndexError) as exc:
        raise DataFileError(f"{path}: malformed header: {exc}") from exc
    payload = data[third + 1:]
    expected = 4 * w * h
    if len(payload) != expected:
        raise DataFileError(
            f"{path}: expected {expected} payload bytes at offset {third + 1}, "
            f"got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w)[::-1]
    return np.ascontiguousarray(values), scale


def save_depth_png(path, depth: np.ndarray, scale: float) -> None:
    """16-bit grayscale raster of depth/scale with a sidecar scale factor."""
    raw = np.rint(np.asarray(depth, dtype=np.float64) / scale)
    if raw.min() < 0 or raw.max() > 65535:
        raise ValueError("depth does not fit 16 bits at this scale")
    Image.fromarray(raw.astype(np.uint16)).save(path)
    with open(str(path) + ".scale", "w") as f:
        f.write(f"{scale:.9g}\n")


def load_depth_png(path) -> np.ndarray:
    scale_path = str(path) + ".scale"
    if not os.path.exists(scale_path):
        raise DataFileError(f"{path}: missing sidecar scale file {scale_path}")
    with open(scale_path) as f:
        try:
            scale = float(f.read().strip())
        except ValueError as exc:
            raise DataFileError(f"{scale_path}:1: not a number") from exc
    raw = np.asarray(Image.open(path), dtype=np.float64)
    return (raw * scale).astype(np.float32)


def load_rgb(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1))


def save_rgb(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    arr = (np.transpose(arr, (1, 2, 0)) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_sample(rgb_path, depth_path, point_path=None,
                sample_id: Optional[str] = None) -> Sample:
    """Assemble a Sample from image/depth/point files.

    Depth comes from a .fmap float map (values times header scale) or a
    16-bit grayscale png with a sidecar scale. Without a point file the
    cloud is empty.
    """
    rgb = load_rgb(rgb_path)
    if str(depth_path).endswith(".fmap"):
        values, scale = load_float_map(depth_path)
        depth = (values * scale).astype(np.float32)
    else:
        depth = load_depth_png(depth_path)
    mask = depth > 0
    cloud = load_point_file(point_path) if point_path else PointCloud(
        np.zeros((0, 3), dtype=np.float32))
    h, w = depth.shape
    return Sample(rgb=rgb, gt_depth=depth, gt_mask=mask, cloud=cloud,
                  intrinsics=default_intrinsics(h, w),
                  id=sample_id or os.path.basename(str(rgb_path)))


def load_manifest(path) -> List[Tuple[str, str, Optional[str]]]:
    """Text manifest: one '(rgb, depth[, points])' triple per line, paths
    relative to the manifest location."""
    base = os.path.dirname(os.path.abspath(path))
    triples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) not in (2, 3):
                raise DataFileError(
                    f"{path}:{lineno}: expected 2 or 3 paths, got {len(parts)}")
            resolved = [os.path.join(base, p) for p in parts]
            triples.append((resolved[0], resolved[1],
                            resolved[2] if len(resolved) == 3 else None))
    return triples


def load_dataset(manifest_path) -> List[Sample]:
    return [load_sample(rgb, depth, pts, sample_id=f"{os.path.basename(rgb)}")
            for rgb, depth, pts in load_manifest(manifest_path)]
