"""End-to-end network: images -> lifted volume -> encoder -> decoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core import GridMeta, VoxelGrid
from .encoder import EncoderConfig, VolumeEncoder
from .occ_decoder import MaskPrediction, OccDecoder, OccDecoderConfig, decoder_forward
from .pixel_decoder import DeformAttnConfig, PixelDecoder
from .view_transform import (
    CameraView,
    ContextDepthHead,
    DepthBins,
    ImageBackbone,
    backbone_forward,
    lift_and_pool,
    predict_context_and_depth,
)


@dataclass
class ModelOutput:
    final: MaskPrediction
    per_layer: list[MaskPrediction]
    depth_logits: torch.Tensor  # (N, D, H, W)
    volume: VoxelGrid


class OccupancyModel(nn.Module):
    """Full pipeline from camera views to per-query occupancy masks."""

    def __init__(
        self,
        volume_meta: GridMeta,
        num_classes: int,
        bins: DepthBins,
        backbone_width: int = 32,
        backbone_stride: int = 8,
        context_channels: int = 32,
        encoder_cfg: EncoderConfig | None = None,
        pixel_cfg: DeformAttnConfig | None = None,
        num_queries: int = 16,
        decoder_layers: int = 3,
        decoder_heads: int = 4,
        pooling_mode: str = "max",
    ):
        super().__init__()
        self.volume_meta = volume_meta
        self.bins = bins
        encoder_cfg = encoder_cfg or EncoderConfig(base_channels=context_channels)
        pixel_cfg = pixel_cfg or DeformAttnConfig()
        self.backbone = ImageBackbone(3, backbone_width, backbone_stride)
        self.head = ContextDepthHead(backbone_width, context_channels, bins.count)
        self.encoder = VolumeEncoder(context_channels, encoder_cfg)
        level_channels = encoder_cfg.stage_channels()[::-1]  # coarse to fine
        self.pixel_decoder = PixelDecoder(level_channels, pixel_cfg)
        self.occ_decoder = OccDecoder(
            OccDecoderConfig(
                num_queries=num_queries,
                num_classes=num_classes,
                channels=pixel_cfg.embed_channels,
                heads=decoder_heads,
                layers=decoder_layers,
                mask_channels=pixel_cfg.mask_channels,
                pooling_mode=pooling_mode,
            )
        )

    def forward(self, views: list[CameraView]) -> ModelOutput:
        features = backbone_forward(views, self.backbone)
        context, depth_logits = predict_context_and_depth(features, self.head, self.bins)
        volume = lift_and_pool(context, depth_logits, views, self.bins, self.volume_meta)
        levels = self.encoder(volume)
        enhanced, e_voxel = self.pixel_decoder(levels)
        attn_levels = enhanced[:-1] if len(enhanced) > 1 else enhanced
        final, per_layer = decoder_forward(attn_levels, e_voxel, self.occ_decoder)
        return ModelOutput(final, per_layer, depth_logits, volume)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
