"""Camera features to 3D: backbone, depth distributions, and voxel pooling.

Per-pixel context features are weighted by a predicted discrete depth
distribution, placed along the camera ray at each bin center, and sum-pooled
into a feature volume. Camera frame: x right, y down, z forward; depth means
camera-frame z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .core import GridMeta, Pose, VoxelGrid


@dataclass
class CameraView:
    """One camera: intrinsics, camera-to-world pose, image, optional depth."""

    intrinsics: torch.Tensor  # (3, 3)
    pose: Pose
    image: torch.Tensor  # (C_img, H_img, W_img)
    gt_depth: torch.Tensor | None = None  # (H_img, W_img), 0 = no return

    def __post_init__(self):
        self.intrinsics = torch.as_tensor(self.intrinsics)
        k = self.intrinsics
        if k.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if abs(float(k[2, 2]) - 1.0) > 1e-6:
            raise ValueError("intrinsics[2,2] must be 1")
        if float(k[0, 0]) <= 0 or float(k[1, 1]) <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class DepthBins:
    """Uniformly spaced depth discretization over [d_min, d_max]."""

    d_min: float = 0.5
    d_max: float = 8.5
    count: int = 16

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError("need 0 < d_min < d_max")
        if self.count < 2:
            raise ValueError("need at least 2 depth bins")

    @property
    def step(self) -> float:
        return (self.d_max - self.d_min) / self.count

    def centers(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        idx = torch.arange(self.count, dtype=dtype)
        return self.d_min + (idx + 0.5) * self.step


@dataclass
class LiftOutput:
    context: torch.Tensor  # (N, C_con, H, W)
    depth_logits: torch.Tensor  # (N, D, H, W)
    volume: VoxelGrid


class ImageBackbone(nn.Module):
    """Small strided conv stack producing one feature map at 1/stride resolution."""

    def __init__(self, in_channels: int = 3, width: int = 32, stride: int = 8):
        super().__init__()
        stages = int(math.log2(stride))
        if 2**stages != stride or stages < 1:
            raise ValueError(f"stride must be a power of two >= 2, got {stride}")
        self.stride = stride
        layers = []
        ch = in_channels
        for _ in range(stages):
            layers += [
                nn.Conv2d(ch, width, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, width), width),
                nn.GELU(),
            ]
            ch = width
        layers += [nn.Conv2d(width, width, 3, padding=1), nn.GroupNorm(min(8, width), width), nn.GELU()]
        self.net = nn.Sequential(*layers)
        self.out_channels = width

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image dims {(h, w)} not divisible by stride {self.stride}")
        return self.net(images)


class ContextDepthHead(nn.Module):
    """Two 1x1-conv heads on shared features: context and depth logits."""

    def __init__(self, in_channels: int, context_channels: int, depth_bins: int):
        super().__init__()
        self.context = nn.Conv2d(in_channels, context_channels, 1)
        self.depth = nn.Conv2d(in_channels, depth_bins, 1)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.context(features), self.depth(features)


def backbone_forward(views: list[CameraView], backbone: ImageBackbone) -> torch.Tensor:
    """Run the backbone over a view list, stacking views along the batch axis."""
    images = torch.stack([v.image for v in views])
    return backbone(images)


def predict_context_and_depth(
    features: torch.Tensor, head: ContextDepthHead, bins: DepthBins
) -> tuple[torch.Tensor, torch.Tensor]:
    context, depth_logits = head(features)
    if depth_logits.shape[1] != bins.count:
        raise ValueError("depth head width does not match bin count")
    return context, depth_logits


def _ray_directions(view: CameraView, feat_h: int, feat_w: int, dtype: torch.dtype) -> torch.Tensor:
    """World-frame ray directions with unit camera-z; one per feature cell."""
    k = view.intrinsics.to(torch.float64)
    if abs(float(torch.det(k))) < 1e-12:
        raise ValueError("intrinsics are not invertible")
    img_h, img_w = view.image.shape[-2:]
    stride_u = img_w / feat_w
    stride_v = img_h / feat_h
    us = (torch.arange(feat_w, dtype=torch.float64) + 0.5) * stride_u
    vs = (torch.arange(feat_h, dtype=torch.float64) + 0.5) * stride_v
    vv, uu = torch.meshgrid(vs, us, indexing="ij")
    pix = torch.stack([uu, vv, torch.ones_like(uu)], dim=-1)  # (H, W, 3)
    dirs_cam = pix @ torch.inverse(k).T
    rot = view.pose.rotation.to(torch.float64)
    dirs_world = dirs_cam @ rot.T
    return dirs_world.to(dtype)


def lift_and_pool(
    context: torch.Tensor,
    depth_logits: torch.Tensor,
    views: list[CameraView],
    bins: DepthBins,
    meta: GridMeta,
) -> VoxelGrid:
    """Outer-product lift followed by sum-pooling into a voxel volume.

    Each feature cell spawns one point per depth bin at the bin center along
    its ray, weighted by the softmax depth probability; points in the same
    voxel are summed, points outside the volume are dropped.
    """
    n, c_con, h, w = context.shape
    d = depth_logits.shape[1]
    dtype = context.dtype
    probs = torch.softmax(depth_logits, dim=1)  # (N, D, H, W)
    centers = bins.centers(dtype=torch.float64)

    res = meta.resolution
    flat = context.new_zeros(c_con, meta.num_voxels)
    for vi, view in enumerate(views):
        dirs = _ray_directions(view, h, w, torch.float64)  # (H, W, 3)
        origin_w = view.pose.translation.to(torch.float64)
        pts = origin_w + centers.view(d, 1, 1, 1) * dirs.unsqueeze(0)  # (D, H, W, 3)
        idx = meta.index_of(pts.reshape(-1, 3))
        valid = meta.in_bounds(idx)
        lin = (idx[:, 0] * res[1] + idx[:, 1]) * res[2] + idx[:, 2]
        lin = lin.clamp(min=0, max=meta.num_voxels - 1)

        feats = context[vi].unsqueeze(1) * probs[vi].unsqueeze(0)  # (C, D, H, W)
        feats = feats.reshape(c_con, -1) * valid.to(dtype)
        flat = flat.index_add(1, lin, feats)
    return VoxelGrid(meta, flat.reshape(c_con, *res))


def depth_targets(
    view: CameraView, bins: DepthBins, stride: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-cell one-hot depth bins from ground-truth depth.

    The minimum in-range return inside each stride x stride window picks the
    nearest bin center; cells without any in-range return are invalid.
    """
    if view.gt_depth is None:
        raise ValueError("view has no ground-truth depth")
    depth = view.gt_depth
    img_h, img_w = depth.shape
    h, w = img_h // stride, img_w // stride
    windows = depth[: h * stride, : w * stride].reshape(h, stride, w, stride)
    windows = windows.permute(0, 2, 1, 3).reshape(h, w, -1)
    in_range = (windows > 0) & (windows >= bins.d_min) & (windows <= bins.d_max)
    masked = torch.where(in_range, windows, torch.full_like(windows, float("inf")))
    cell_depth = masked.amin(dim=-1)
    valid = in_range.any(dim=-1)

    bin_idx = torch.floor((cell_depth - bins.d_min) / bins.step).long()
    bin_idx = bin_idx.clamp(0, bins.count - 1)
    one_hot = torch.zeros(bins.count, h, w, dtype=torch.float32)
    hh, ww = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    one_hot[bin_idx[valid], hh[valid], ww[valid]] = 1.0
    return one_hot, valid


def depth_bce_loss(
    depth_logits: torch.Tensor, one_hot: torch.Tensor, valid_mask: torch.Tensor
) -> torch.Tensor:
    """Mean binary cross-entropy over valid cells between softmaxed depth and one-hot."""
    if depth_logits.ndim == 3:
        depth_logits = depth_logits.unsqueeze(0)
        one_hot = one_hot.unsqueeze(0)
        valid_mask = valid_mask.unsqueeze(0)
    eps = 1e-12
    probs = torch.softmax(depth_logits, dim=1)
    bce = -(
        one_hot * probs.clamp(min=eps).log()
        + (1.0 - one_hot) * (1.0 - probs).clamp(min=eps).log()
    ).sum(dim=1)
    valid = valid_mask.to(bce.dtype)
    total = valid.sum()
    if total == 0:
        return depth_logits.sum() * 0.0
    return (bce * valid).sum() / total
