"""Shared geometric primitives: voxel grids, trilinear sampling, pooling.

World frame convention: X forward, Y left, Z up. A grid's origin is the
world position of the corner of voxel (0, 0, 0); voxel centers sit at
origin + voxel_size * (index + 0.5).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch

IGNORE_LABEL = 255


@dataclass(frozen=True)
class GridMeta:
    """Resolution, voxel size, and world-frame placement of a voxel grid."""

    resolution: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.resolution) != 3 or any(int(r) < 1 for r in self.resolution):
            raise ValueError(f"resolution must be three positive ints, got {self.resolution}")
        if len(self.voxel_size) != 3 or any(s <= 0 for s in self.voxel_size):
            raise ValueError(f"voxel_size must be three positive floats, got {self.voxel_size}")
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def num_voxels(self) -> int:
        x, y, z = self.resolution
        return x * y * z

    @property
    def extent(self) -> tuple[float, float, float]:
        """World-frame edge lengths of the full grid."""
        return tuple(r * s for r, s in zip(self.resolution, self.voxel_size))

    def world_of(self, index: torch.Tensor) -> torch.Tensor:
        """Voxel-center world coordinates for integer indices (M, 3)."""
        vs = torch.as_tensor(self.voxel_size, dtype=torch.float64)
        org = torch.as_tensor(self.origin, dtype=torch.float64)
        return org + vs * (index.to(torch.float64) + 0.5)

    def index_of(self, world: torch.Tensor) -> torch.Tensor:
        """Containing-voxel indices for world points (M, 3); may be out of bounds."""
        vs = torch.as_tensor(self.voxel_size, dtype=torch.float64)
        org = torch.as_tensor(self.origin, dtype=torch.float64)
        return torch.floor((world.to(torch.float64) - org) / vs).long()

    def continuous_index(self, world: torch.Tensor) -> torch.Tensor:
        """Continuous voxel coordinates where integer i is the center of voxel i."""
        vs = torch.as_tensor(self.voxel_size, dtype=world.dtype)
        org = torch.as_tensor(self.origin, dtype=world.dtype)
        return (world - org) / vs - 0.5

    def in_bounds(self, index: torch.Tensor) -> torch.Tensor:
        res = torch.as_tensor(self.resolution, device=index.device)
        return ((index >= 0) & (index < res)).all(dim=-1)

    def pooled(self, factor: tuple[int, int, int]) -> "GridMeta":
        """Metadata after pooling by an integer factor per axis (ceil division)."""
        res = tuple(-(-r // f) for r, f in zip(self.resolution, factor))
        vs = tuple(s * f for s, f in zip(self.voxel_size, factor))
        return GridMeta(res, vs, self.origin)

    def upsampled(self, factor: int) -> "GridMeta":
        res = tuple(r * factor for r in self.resolution)
        vs = tuple(s / factor for s in self.voxel_size)
        return GridMeta(res, vs, self.origin)


@dataclass
class VoxelGrid:
    """Dense C x X x Y x Z volume with world-frame metadata.

    ``data`` carries features, per-class scores, or (with a single integer
    channel) semantic labels in {0..N_c-1} plus IGNORE_LABEL.
    """

    meta: GridMeta
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"data must be (C, X, Y, Z), got shape {tuple(self.data.shape)}")
        if tuple(self.data.shape[1:]) != self.meta.resolution:
            raise ValueError(
                f"data spatial shape {tuple(self.data.shape[1:])} does not match "
                f"meta resolution {self.meta.resolution}"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: torch.Tensor) -> "VoxelGrid":
        return VoxelGrid(self.meta, data)


@dataclass
class Pose:
    """Rigid camera-to-world transform."""

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        self.rotation = torch.as_tensor(self.rotation)
        self.translation = torch.as_tensor(self.translation)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        r = self.rotation.double()
        if not torch.allclose(r.T @ r, torch.eye(3, dtype=torch.float64), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if torch.det(r) < 0:
            raise ValueError("rotation has negative determinant (reflection)")


def trilinear_sample(grid: VoxelGrid, points: torch.Tensor) -> torch.Tensor:
    """Sample grid features at continuous voxel coordinates (zero padding).

    ``points`` is (M, 3) in the grid's continuous index space: integer
    coordinate i lies at the center of voxel i. Out-of-bounds corners
    contribute zero. Differentiable w.r.t. both the grid data and the points.
    """
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (M, 3), got {tuple(points.shape)}")
    data = grid.data
    res = grid.meta.resolution
    base = torch.floor(points)
    frac = points - base
    base = base.long()

    out = data.new_zeros(points.shape[0], data.shape[0])
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + base.new_tensor(corner)
        weight = points.new_ones(points.shape[0])
        for axis, bit in enumerate(corner):
            weight = weight * (frac[:, axis] if bit else 1.0 - frac[:, axis])
        valid = ((idx >= 0) & (idx < idx.new_tensor(res))).all(dim=1)
        safe = idx.clamp(min=0)
        safe = torch.minimum(safe, safe.new_tensor(res) - 1)
        vals = data[:, safe[:, 0], safe[:, 1], safe[:, 2]].transpose(0, 1)  # (M, C)
        out = out + (weight * valid.to(weight.dtype)).unsqueeze(1) * vals
    return out


def max_pool_3d(grid: VoxelGrid, factor: tuple[int, int, int]) -> VoxelGrid:
    """Max-pool by an integer factor per axis, padding with -inf if needed."""
    if any(int(f) < 1 for f in factor):
        raise ValueError(f"pooling factor must be positive, got {factor}")
    factor = tuple(int(f) for f in factor)
    data = grid.data
    pad = [(-s) % f for s, f in zip(data.shape[1:], factor)]
    if any(pad):
        # F.pad wants (z_lo, z_hi, y_lo, y_hi, x_lo, x_hi) for the last 3 dims.
        data = torch.nn.functional.pad(
            data, (0, pad[2], 0, pad[1], 0, pad[0]), value=float("-inf")
        )
    c = data.shape[0]
    ox, oy, oz = (data.shape[i + 1] // factor[i] for i in range(3))
    data = data.reshape(c, ox, factor[0], oy, factor[1], oz, factor[2])
    pooled = data.amax(dim=(2, 4, 6))
    return VoxelGrid(grid.meta.pooled(factor), pooled)


def avg_pool_height(grid: VoxelGrid) -> torch.Tensor:
    """Collapse the height axis by averaging: (C, X, Y, Z) -> (C, X, Y)."""
    return grid.data.mean(dim=3)


def voxel_world_coords(meta: GridMeta, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """World coordinates of every voxel center, (X*Y*Z, 3).

    Rows are ordered C-style: index k varies fastest, then j, then i, so the
    row for voxel (i, j, k) is (i * Y + j) * Z + k.
    """
    x, y, z = meta.resolution
    ii, jj, kk = torch.meshgrid(
        torch.arange(x, dtype=dtype),
        torch.arange(y, dtype=dtype),
        torch.arange(z, dtype=dtype),
        indexing="ij",
    )
    idx = torch.stack([ii, jj, kk], dim=-1).reshape(-1, 3)
    vs = torch.as_tensor(meta.voxel_size, dtype=dtype)
    org = torch.as_tensor(meta.origin, dtype=dtype)
    return org + vs * (idx + 0.5)


def normalized_voxel_coords(meta: GridMeta, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Voxel centers normalized to [0, 1]^3 by the grid's world extent."""
    coords = voxel_world_coords(meta, dtype=torch.float64)
    org = torch.as_tensor(meta.origin, dtype=torch.float64)
    ext = torch.as_tensor(meta.extent, dtype=torch.float64)
    return ((coords - org) / ext).to(dtype)
