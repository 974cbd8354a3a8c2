"""Query-based occupancy decoder.

Learned queries attend to foreground voxels through additive attention masks
derived from their own previous mask predictions (max-pooled to the working
level so sparse positives survive downsampling), refine through self-attention
and a feed-forward, and emit one (class, 3D mask) pair each. Per-voxel scores
are composed as sum_i p_i * M_i over queries, then optionally upsampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .core import GridMeta, VoxelGrid, max_pool_3d, normalized_voxel_coords

POOLING_MODES = ("max", "trilinear")


@dataclass
class OccDecoderConfig:
    num_queries: int = 16
    num_classes: int = 8
    channels: int = 48
    heads: int = 4
    layers: int = 3
    mask_channels: int = 48
    pooling_mode: str = "max"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.channels % 6:
            raise ValueError("channels must be divisible by 6 for 3D position encoding")
        if self.pooling_mode not in POOLING_MODES:
            raise ValueError(f"pooling_mode must be one of {POOLING_MODES}")


@dataclass
class MaskPrediction:
    """Per-query class logits and full-resolution mask logits."""

    class_logits: torch.Tensor  # (N_q, N_c + 1), last column = no-object
    mask_logits: torch.Tensor  # (N_q, X, Y, Z)
    meta: GridMeta

    @property
    def class_probs(self) -> torch.Tensor:
        return self.class_logits.softmax(dim=-1)

    @property
    def mask_probs(self) -> torch.Tensor:
        return self.mask_logits.sigmoid()


@dataclass
class QuerySet:
    """Final query features plus the prediction made after every layer."""

    queries: torch.Tensor  # (N_q, C)
    predictions: list[MaskPrediction] = field(default_factory=list)


def position_encoding_3d(meta: GridMeta, channels: int, dtype: torch.dtype) -> torch.Tensor:
    """Sinusoidal embedding of normalized voxel centers, (num_voxels, channels)."""
    if channels % 6:
        raise ValueError("channels must be divisible by 6")
    per_axis = channels // 3
    coords = normalized_voxel_coords(meta, dtype=torch.float64) * (2 * math.pi)
    freq = torch.arange(per_axis // 2, dtype=torch.float64)
    inv = 1.0 / (100.0 ** (2 * freq / per_axis))
    parts = []
    for axis in range(3):
        ang = coords[:, axis : axis + 1] * inv
        parts.append(torch.cat([ang.sin(), ang.cos()], dim=1))
    return torch.cat(parts, dim=1).to(dtype)


def _multi_head_attention(q, k, v, heads, out_proj, additive_mask=None):
    nq, c = q.shape
    dim = c // heads
    qh = q.reshape(nq, heads, dim).permute(1, 0, 2)
    kh = k.reshape(-1, heads, dim).permute(1, 0, 2)
    vh = v.reshape(-1, heads, dim).permute(1, 0, 2)
    attn = qh @ kh.transpose(-2, -1) * dim**-0.5
    if additive_mask is not None:
        attn = attn + additive_mask.unsqueeze(0)
    attn = attn.softmax(dim=-1)
    out = (attn @ vh).permute(1, 0, 2).reshape(nq, c)
    return out_proj(out)


class MaskedAttentionLayer(nn.Module):
    """Masked cross-attention, query self-attention, feed-forward (pre-norm)."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm_cross = nn.LayerNorm(channels)
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.cross_out = nn.Linear(channels, channels)
        self.norm_self = nn.LayerNorm(channels)
        self.self_qkv = nn.Linear(channels, 3 * channels)
        self.self_out = nn.Linear(channels, channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels)
        )

    def forward(
        self,
        queries: torch.Tensor,
        level_feat: torch.Tensor,
        level_pe: torch.Tensor,
        query_pos: torch.Tensor,
        attn_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        if attn_mask is not None:
            if attn_mask.shape != (queries.shape[0], level_feat.shape[0]):
                raise ValueError(
                    f"attention mask shape {tuple(attn_mask.shape)} does not match "
                    f"(queries, voxels) = {(queries.shape[0], level_feat.shape[0])}"
                )
            # A fully blocked query falls back to attending everywhere.
            blocked_rows = torch.isinf(attn_mask).all(dim=1)
            if blocked_rows.any():
                attn_mask = attn_mask.clone()
                attn_mask[blocked_rows] = 0.0

        x = queries
        qn = self.norm_cross(x)
        q = self.q_proj(qn + query_pos)
        k = self.k_proj(level_feat + level_pe)
        v = self.v_proj(level_feat)
        x = x + _multi_head_attention(q, k, v, self.heads, self.cross_out, attn_mask)

        # query_pos enters q and k of the self-attention but not v
        yn = self.norm_self(x)
        q2, k2, _ = self.self_qkv(yn + query_pos).chunk(3, dim=-1)
        _, _, v2 = self.self_qkv(yn).chunk(3, dim=-1)
        x = x + _multi_head_attention(q2, k2, v2, self.heads, self.self_out)

        x = x + self.ffn(self.norm_ffn(x))
        return x


def masked_attention_layer(
    queries: torch.Tensor,
    level: VoxelGrid,
    attn_mask: torch.Tensor | None,
    layer: MaskedAttentionLayer,
    query_pos: torch.Tensor | None = None,
) -> torch.Tensor:
    feat = level.data.reshape(level.channels, -1).T
    pe = position_encoding_3d(level.meta, level.channels, feat.dtype)
    if query_pos is None:
        query_pos = torch.zeros_like(queries)
    return layer(queries, feat, pe, query_pos, attn_mask)


class QueryHeads(nn.Module):
    """Class logits and mask embeddings from query features."""

    def __init__(self, channels: int, num_classes: int, mask_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.class_head = nn.Linear(channels, num_classes + 1)
        self.mask_head = nn.Sequential(
            nn.Linear(channels, channels),
            nn.ReLU(),
            nn.Linear(channels, channels),
            nn.ReLU(),
            nn.Linear(channels, mask_channels),
        )

    def forward(self, queries: torch.Tensor, e_voxel: VoxelGrid) -> MaskPrediction:
        qn = self.norm(queries)
        class_logits = self.class_head(qn)
        embeddings = self.mask_head(qn)  # (N_q, C_E)
        mask_logits = torch.einsum("qc,cxyz->qxyz", embeddings, e_voxel.data)
        return MaskPrediction(class_logits, mask_logits, e_voxel.meta)


def predict_class_and_mask(
    queries: torch.Tensor, e_voxel: VoxelGrid, heads: QueryHeads
) -> MaskPrediction:
    return heads(queries, e_voxel)


def make_attention_mask(
    mask_probs: torch.Tensor, target_meta: GridMeta, mode: str = "max"
) -> torch.Tensor:
    """Downsample mask probabilities to a level and threshold into an additive mask.

    Returns (N_q, target voxels) with 0 where the pooled probability is >= 0.5
    (attend) and -inf otherwise. ``mode='max'`` preserves sparse positives;
    ``mode='trilinear'`` averages each window instead (the dilution baseline).
    """
    if mode not in POOLING_MODES:
        raise ValueError(f"mode must be one of {POOLING_MODES}")
    src = mask_probs.shape[1:]
    tgt = target_meta.resolution
    factor = []
    for s, t in zip(src, tgt):
        if s % t:
            raise ValueError(f"mask resolution {src} not an integer multiple of {tgt}")
        factor.append(s // t)
    if mode == "max":
        pooled = max_pool_3d(VoxelGrid(GridMeta(src), mask_probs), tuple(factor)).data
    else:
        pooled = F.avg_pool3d(mask_probs.unsqueeze(0), kernel_size=factor, stride=factor)[0]
    attend = pooled >= 0.5
    flat = attend.reshape(attend.shape[0], -1)
    mask = torch.where(
        flat,
        torch.zeros((), dtype=mask_probs.dtype),
        torch.full((), float("-inf"), dtype=mask_probs.dtype),
    )
    return mask


class OccDecoder(nn.Module):
    """Iterative query refinement over coarse-to-fine levels with deep supervision."""

    def __init__(self, cfg: OccDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.query_feat = nn.Embedding(cfg.num_queries, cfg.channels)
        self.query_pos = nn.Embedding(cfg.num_queries, cfg.channels)
        self.layers = nn.ModuleList(
            MaskedAttentionLayer(cfg.channels, cfg.heads) for _ in range(cfg.layers)
        )
        self.heads = QueryHeads(cfg.channels, cfg.num_classes, cfg.mask_channels)

    def forward(self, levels: list[VoxelGrid], e_voxel: VoxelGrid) -> QuerySet:
        """``levels`` are the attention levels, coarse to fine, finest excluded."""
        dtype = e_voxel.data.dtype
        queries = self.query_feat.weight.to(dtype)
        query_pos = self.query_pos.weight.to(dtype)
        preds = [self.heads(queries, e_voxel)]
        for li, layer in enumerate(self.layers):
            level = levels[li % len(levels)]
            attn_mask = make_attention_mask(
                preds[-1].mask_probs.detach(), level.meta, self.cfg.pooling_mode
            )
            feat = level.data.reshape(level.channels, -1).T
            pe = position_encoding_3d(level.meta, level.channels, dtype)
            queries = layer(queries, feat, pe, query_pos, attn_mask)
            preds.append(self.heads(queries, e_voxel))
        return QuerySet(queries, preds)


def decoder_forward(
    levels: list[VoxelGrid], e_voxel: VoxelGrid, decoder: OccDecoder
) -> tuple[MaskPrediction, list[MaskPrediction]]:
    out = decoder(levels, e_voxel)
    return out.predictions[-1], out.predictions


def compose_occupancy(pred: MaskPrediction) -> tuple[VoxelGrid, VoxelGrid]:
    """Voxel class scores sum_i p_i * M_i (no-object dropped) and argmax labels."""
    probs = pred.class_probs[:, :-1]  # (N_q, N_c)
    scores = torch.einsum("qc,qxyz->cxyz", probs, pred.mask_probs)
    labels = scores.argmax(dim=0, keepdim=True)
    return VoxelGrid(pred.meta, scores), VoxelGrid(pred.meta, labels)


def upsample_prediction(scores: VoxelGrid, factor: int = 2) -> VoxelGrid:
    """Trilinearly upsample per-class scores; metadata is rescaled to match."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return scores
    up = F.interpolate(
        scores.data.unsqueeze(0).float(),
        scale_factor=factor,
        mode="trilinear",
        align_corners=False,
    )[0].to(scores.data.dtype)
    return VoxelGrid(scores.meta.upsampled(factor), up)
