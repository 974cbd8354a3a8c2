"""Multi-scale deformable self-attention over the encoder's feature pyramid.

Every voxel of every level acts as a query: it predicts per-head sampling
offsets and weights for all levels, gathers values by trilinear sampling at
its own (physically aligned) reference location plus the offsets, and adds
the weighted sum back residually. Reference points and offsets live in
coordinates normalized to [0, 1]^3 by the shared world extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core import VoxelGrid, normalized_voxel_coords, trilinear_sample


@dataclass
class DeformAttnConfig:
    embed_channels: int = 48
    layers: int = 2
    heads: int = 4
    points: int = 4
    mask_channels: int = 48  # width of the per-voxel embeddings

    def __post_init__(self):
        if self.embed_channels % self.heads:
            raise ValueError("embed_channels must be divisible by heads")
        if self.points < 1:
            raise ValueError("need at least one sampling point")


class DeformAttn3dLayer(nn.Module):
    """One deformable-attention layer acting on a list of feature volumes."""

    def __init__(self, channels: int, heads: int, levels: int, points: int):
        super().__init__()
        self.heads = heads
        self.levels = levels
        self.points = points
        self.dim = channels // heads
        self.offset_head = nn.Linear(channels, heads * levels * points * 3)
        self.weight_head = nn.Linear(channels, heads * levels * points)
        self.value_proj = nn.Linear(channels, channels)
        self.output_proj = nn.Linear(channels, channels)
        self.ffn_norm = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels)
        )
        # Zero offsets and uniform weights at init: the first pass is close to
        # identity plus projection.
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.offset_head.bias)
        nn.init.zeros_(self.weight_head.weight)
        nn.init.zeros_(self.weight_head.bias)

    def forward(self, levels: list[VoxelGrid]) -> list[VoxelGrid]:
        if not levels:
            raise ValueError("need at least one feature level")
        if len(levels) != self.levels:
            raise ValueError(f"layer built for {self.levels} levels, got {len(levels)}")
        dtype = levels[0].data.dtype
        counts = [lvl.meta.num_voxels for lvl in levels]
        feats = torch.cat([lvl.data.reshape(lvl.channels, -1).T for lvl in levels])  # (Nq, C)
        refs = torch.cat(
            [normalized_voxel_coords(lvl.meta, dtype=dtype) for lvl in levels]
        )  # (Nq, 3)

        nq = feats.shape[0]
        offsets = self.offset_head(feats).reshape(nq, self.heads, self.levels, self.points, 3)
        weights = self.weight_head(feats).reshape(nq, self.heads, self.levels * self.points)
        weights = weights.softmax(dim=-1).reshape(nq, self.heads, self.levels, self.points)

        update = feats.new_zeros(nq, self.heads, self.dim)
        for j, lvl in enumerate(levels):
            value = self.value_proj(lvl.data.reshape(lvl.channels, -1).T)
            value = value.T.reshape(self.heads, self.dim, *lvl.meta.resolution)
            res = feats.new_tensor(lvl.meta.resolution)
            for h in range(self.heads):
                head_grid = VoxelGrid(lvl.meta, value[h])
                # normalized [0,1]^3 -> continuous voxel-index coordinates
                pos = (refs.unsqueeze(1) + offsets[:, h, j]) * res - 0.5
                sampled = trilinear_sample(head_grid, pos.reshape(-1, 3))
                sampled = sampled.reshape(nq, self.points, self.dim)
                update[:, h] += (weights[:, h, j].unsqueeze(-1) * sampled).sum(dim=1)

        out = feats + self.output_proj(update.reshape(nq, -1))
        out = out + self.ffn(self.ffn_norm(out))

        pieces = out.split(counts)
        return [
            VoxelGrid(lvl.meta, piece.T.reshape(lvl.channels, *lvl.meta.resolution))
            for lvl, piece in zip(levels, pieces)
        ]


def deform_attn_3d_layer(levels: list[VoxelGrid], layer: DeformAttn3dLayer) -> list[VoxelGrid]:
    return layer(levels)


class PixelDecoder(nn.Module):
    """Projects levels to a shared width, refines them, and emits per-voxel embeddings."""

    def __init__(self, in_channels: list[int], cfg: DeformAttnConfig):
        super().__init__()
        self.cfg = cfg
        self.input_projs = nn.ModuleList(
            nn.Conv3d(c, cfg.embed_channels, 1) for c in in_channels
        )
        self.layers = nn.ModuleList(
            DeformAttn3dLayer(cfg.embed_channels, cfg.heads, len(in_channels), cfg.points)
            for _ in range(cfg.layers)
        )
        self.embed_proj = nn.Conv3d(cfg.embed_channels, cfg.mask_channels, 1)

    def forward(self, levels: list[VoxelGrid]) -> tuple[list[VoxelGrid], VoxelGrid]:
        """Returns (enhanced levels, per-voxel embeddings from the finest level).

        Levels are expected coarse to fine; the last entry is the finest.
        """
        if len(levels) != len(self.input_projs):
            raise ValueError("level count does not match decoder construction")
        cur = [
            VoxelGrid(lvl.meta, proj(lvl.data.unsqueeze(0))[0])
            for lvl, proj in zip(levels, self.input_projs)
        ]
        for layer in self.layers:
            cur = layer(cur)
        finest = cur[-1]
        e_voxel = VoxelGrid(finest.meta, self.embed_proj(finest.data.unsqueeze(0))[0])
        return cur, e_voxel


def pixel_decoder_forward(
    levels: list[VoxelGrid], decoder: PixelDecoder
) -> tuple[list[VoxelGrid], VoxelGrid]:
    return decoder(levels)
