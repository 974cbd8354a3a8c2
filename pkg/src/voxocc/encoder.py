"""Dual-path volume encoder.

Each block processes the volume along the horizontal plane twice: a local
path applies windowed self-attention to every BEV slice (height merged into
the batch), and a global path applies the same attention plus a bottleneck
ASPP to the height-averaged BEV map. The two are fused by a sigmoid gate and
wrapped in a block-level residual. A 3D convolution sits between consecutive
blocks; stride-(2,2,1) convolutions downsample between stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .core import VoxelGrid, avg_pool_height

ENCODER_VARIANTS = ("dual_path", "local_only", "global_only", "conv3d")


@dataclass
class DualPathConfig:
    channels: int = 32
    window_size: int = 4
    heads: int = 4
    aspp_dilations: tuple[int, ...] = (1, 2, 3)
    aspp_bottleneck_ratio: int = 4
    use_soft_sum: bool = True
    use_shared_attention: bool = True
    use_aspp: bool = True
    variant: str = "dual_path"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.window_size < 1 or self.aspp_bottleneck_ratio < 1:
            raise ValueError("window_size and aspp_bottleneck_ratio must be >= 1")
        if self.variant not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}")


@dataclass
class EncoderConfig:
    base_channels: int = 32
    stages: int = 4
    blocks_per_stage: int = 2
    window_size: int = 4
    heads: int = 4
    aspp_dilations: tuple[int, ...] = (1, 2, 3)
    aspp_bottleneck_ratio: int = 4
    use_soft_sum: bool = True
    use_shared_attention: bool = True
    use_aspp: bool = True
    variant: str = "dual_path"
    max_channel_factor: int = 4

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")

    def stage_channels(self) -> list[int]:
        cap = self.base_channels * self.max_channel_factor
        return [min(self.base_channels * 2**s, cap) for s in range(self.stages)]

    def block_config(self, channels: int) -> DualPathConfig:
        return DualPathConfig(
            channels=channels,
            window_size=self.window_size,
            heads=self.heads,
            aspp_dilations=self.aspp_dilations,
            aspp_bottleneck_ratio=self.aspp_bottleneck_ratio,
            use_soft_sum=self.use_soft_sum,
            use_shared_attention=self.use_shared_attention,
            use_aspp=self.use_aspp,
            variant=self.variant,
        )


class WindowedAttention2d(nn.Module):
    """Swin-style block: windowed MSA and a feed-forward, both pre-norm residual.

    Padding to window multiples is masked out of the attention, so a window
    covering the whole (unshifted) input is exactly full self-attention.
    """

    def __init__(self, channels: int, heads: int, window: int):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.heads = heads
        self.window = window
        self.scale = (channels // heads) ** -0.5
        self.norm1 = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels)
        )

    def forward(self, feat: torch.Tensor, shifted: bool = False) -> torch.Tensor:
        x = feat.permute(0, 2, 3, 1)  # (B, H, W, C)
        x = x + self.attend(self.norm1(x), shifted)
        x = x + self.mlp(self.norm2(x))
        return x.permute(0, 3, 1, 2)

    def attend(self, x: torch.Tensor, shifted: bool = False) -> torch.Tensor:
        """Raw windowed attention on channel-last input (no norm, no residual)."""
        b, h, w, c = x.shape
        win = self.window
        shift = win // 2 if shifted and max(h, w) > win else 0

        ph, pw = (-h) % win, (-w) % win
        x = F.pad(x, (0, 0, 0, pw, 0, ph))
        hp, wp = h + ph, w + pw

        valid = x.new_ones(hp, wp, dtype=torch.bool)
        valid[h:, :] = False
        valid[:, w:] = False
        if shift:
            x = torch.roll(x, (-shift, -shift), dims=(1, 2))
            valid = torch.roll(valid, (-shift, -shift), dims=(0, 1))
        region = x.new_zeros(hp, wp, dtype=torch.long)
        if shift:
            # Region ids in the rolled layout: wrapped content must not attend
            # across its original boundary.
            bounds = (slice(0, hp - win), slice(hp - win, hp - shift), slice(hp - shift, hp))
            bounds_w = (slice(0, wp - win), slice(wp - win, wp - shift), slice(wp - shift, wp))
            rid = 0
            for hs in bounds:
                for ws in bounds_w:
                    region[hs, ws] = rid
                    rid += 1
        region = torch.where(valid, region, torch.full_like(region, -1))

        nh, nw = hp // win, wp // win
        windows = x.reshape(b, nh, win, nw, win, c).permute(0, 1, 3, 2, 4, 5)
        windows = windows.reshape(b, nh * nw, win * win, c)
        reg = region.reshape(nh, win, nw, win).permute(0, 2, 1, 3).reshape(nh * nw, win * win)
        blocked = reg.unsqueeze(1) != reg.unsqueeze(2)  # (nW, ww, ww)

        qkv = self.qkv(windows).reshape(b, nh * nw, win * win, 3, self.heads, -1)
        q, k, v = qkv.permute(3, 0, 1, 4, 2, 5)  # each (B, nW, heads, ww, dim)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.masked_fill(blocked.unsqueeze(0).unsqueeze(2), float("-inf"))
        attn = attn.softmax(dim=-1)
        out = attn @ v  # (B, nW, heads, ww, dim)
        out = out.permute(0, 1, 3, 2, 4).reshape(b, nh * nw, win * win, c)
        out = self.proj(out)

        out = out.reshape(b, nh, nw, win, win, c).permute(0, 1, 3, 2, 4, 5)
        out = out.reshape(b, hp, wp, c)
        if shift:
            out = torch.roll(out, (shift, shift), dims=(1, 2))
        return out[:, :h, :w]


def windowed_attention_2d(
    feat: torch.Tensor, attention: WindowedAttention2d, shifted: bool = False
) -> torch.Tensor:
    return attention(feat, shifted=shifted)


def local_path(
    volume: VoxelGrid, attention: WindowedAttention2d, shifted: bool = False
) -> VoxelGrid:
    """Apply the shared windowed attention to every BEV slice independently."""
    feat = volume.data.permute(3, 0, 1, 2)  # height merged into the batch: (Z, C, X, Y)
    out = attention(feat, shifted=shifted)
    return VoxelGrid(volume.meta, out.permute(1, 2, 3, 0))


class AsppBottleneck(nn.Module):
    """Channel-reduced ASPP over a BEV map with a global-average branch."""

    def __init__(self, channels: int, dilations: tuple[int, ...] = (1, 2, 3), ratio: int = 4):
        super().__init__()
        mid = max(1, channels // ratio)
        self.reduce = nn.Conv2d(channels, mid, 1)
        self.act = nn.GELU()
        self.branches = nn.ModuleList(
            nn.Conv2d(mid, mid, 3, padding=d, dilation=d) for d in dilations
        )
        self.global_proj = nn.Conv2d(mid, mid, 1)
        self.expand = nn.Conv2d(mid * (len(dilations) + 1), channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = self.act(self.reduce(x))
        outs = [self.act(b(r)) for b in self.branches]
        g = self.act(self.global_proj(r.mean(dim=(2, 3), keepdim=True)))
        outs.append(g.expand(-1, -1, x.shape[2], x.shape[3]))
        return x + self.expand(torch.cat(outs, dim=1))


def global_path(
    volume: VoxelGrid,
    attention: WindowedAttention2d | None,
    aspp: AsppBottleneck | None,
    shifted: bool = False,
) -> torch.Tensor:
    """Height-pooled BEV branch: optional shared attention, then optional ASPP."""
    bev = avg_pool_height(volume).unsqueeze(0)  # (1, C, X, Y)
    if attention is not None:
        bev = attention(bev, shifted=shifted)
    if aspp is not None:
        bev = aspp(bev)
    return bev[0]


def fuse_dual_path(
    f_local: VoxelGrid,
    f_global: torch.Tensor,
    gate: nn.Module,
    use_soft_sum: bool = True,
) -> VoxelGrid:
    """Broadcast the BEV map along height, weighted per cell by a sigmoid gate."""
    if f_local.channels != f_global.shape[0]:
        raise ValueError("local/global channel mismatch")
    if use_soft_sum:
        g = torch.sigmoid(gate(f_local.data.unsqueeze(0))[0, 0])  # (X, Y, Z)
        fused = f_local.data + g.unsqueeze(0) * f_global.unsqueeze(-1)
    else:
        fused = f_local.data + f_global.unsqueeze(-1)
    return VoxelGrid(f_local.meta, fused)


class DualPathBlock(nn.Module):
    def __init__(self, cfg: DualPathConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.attention = WindowedAttention2d(c, cfg.heads, cfg.window_size)
        # Removing weight sharing removes the attention from the global path.
        self.global_attention = self.attention if cfg.use_shared_attention else None
        self.aspp = (
            AsppBottleneck(c, cfg.aspp_dilations, cfg.aspp_bottleneck_ratio)
            if cfg.use_aspp
            else None
        )
        self.gate = nn.Conv3d(c, 1, 1)
        self.out_proj = nn.Conv3d(c, c, 1)

    def forward(self, volume: VoxelGrid, shifted: bool = False) -> VoxelGrid:
        variant = self.cfg.variant
        if variant == "local_only":
            fused = local_path(volume, self.attention, shifted).data
        elif variant == "global_only":
            gmap = global_path(volume, self.global_attention, self.aspp, shifted)
            fused = gmap.unsqueeze(-1).expand_as(volume.data)
        else:
            f_local = local_path(volume, self.attention, shifted)
            f_global = global_path(volume, self.global_attention, self.aspp, shifted)
            fused = fuse_dual_path(f_local, f_global, self.gate, self.cfg.use_soft_sum).data
        out = volume.data + self.out_proj(fused.unsqueeze(0))[0]
        return VoxelGrid(volume.meta, out)


def dual_path_block(volume: VoxelGrid, block: DualPathBlock, shifted: bool = False) -> VoxelGrid:
    return block(volume, shifted=shifted)


class Conv3dBlock(nn.Module):
    """Residual double 3x3x3 convolution block (encoder baseline)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, channels), channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, channels), channels)
        self.act = nn.GELU()

    def forward(self, volume: VoxelGrid, shifted: bool = False) -> VoxelGrid:
        x = volume.data.unsqueeze(0)
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return VoxelGrid(volume.meta, self.act(x + y)[0])


class _ConvDown(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: tuple[int, int, int]):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class VolumeEncoder(nn.Module):
    """Multi-stage encoder returning one feature volume per stage."""

    def __init__(self, in_channels: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.stage_channels()
        self.input_proj = (
            nn.Conv3d(in_channels, chs[0], 1) if in_channels != chs[0] else nn.Identity()
        )
        make_block = Conv3dBlock if cfg.variant == "conv3d" else DualPathBlock
        self.stages = nn.ModuleList()
        self.intra_convs = nn.ModuleList()
        self.down_convs = nn.ModuleList()
        for s, c in enumerate(chs):
            if cfg.variant == "conv3d":
                blocks = nn.ModuleList(Conv3dBlock(c) for _ in range(cfg.blocks_per_stage))
            else:
                blocks = nn.ModuleList(
                    DualPathBlock(cfg.block_config(c)) for _ in range(cfg.blocks_per_stage)
                )
            self.stages.append(blocks)
            self.intra_convs.append(
                nn.ModuleList(
                    _ConvDown(c, c, (1, 1, 1)) for _ in range(cfg.blocks_per_stage - 1)
                )
            )
            if s + 1 < len(chs):
                self.down_convs.append(_ConvDown(c, chs[s + 1], (2, 2, 1)))

    def forward(self, volume: VoxelGrid) -> list[VoxelGrid]:
        """Run all stages; returns levels ordered coarse to fine."""
        x, y, _ = volume.meta.resolution
        need = 2 ** (self.cfg.stages - 1)
        if x % need or y % need:
            raise ValueError(
                f"resolution {volume.meta.resolution} not divisible by {need} in X/Y"
            )
        cur = VoxelGrid(volume.meta, self.input_proj(volume.data.unsqueeze(0))[0])
        levels = []
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                cur = block(cur, shifted=(b % 2 == 1))
                if b < len(blocks) - 1:
                    cur = VoxelGrid(cur.meta, self.intra_convs[s][b](cur.data.unsqueeze(0))[0])
            levels.append(cur)
            if s + 1 < len(self.stages):
                down = self.down_convs[s](cur.data.unsqueeze(0))[0]
                cur = VoxelGrid(cur.meta.pooled((2, 2, 1)), down)
        return levels[::-1]


def encoder_forward(volume: VoxelGrid, encoder: VolumeEncoder) -> list[VoxelGrid]:
    return encoder(volume)
