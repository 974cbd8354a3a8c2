"""Supervision machinery: point sampling, matching, and losses.

Supervision points are drawn from a multinomial over voxels whose weights
come from inverse class frequencies raised to a power, so rare classes are
sampled far above their volumetric share. Query-to-segment assignment is a
minimum-cost bipartite matching over class and point-sampled mask terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import IGNORE_LABEL, VoxelGrid
from .occ_decoder import MaskPrediction

UNLABELED = -1  # sampled position with no ground-truth class (sparse mode)

EPS = 1e-12


@dataclass
class ClassStats:
    """Per-class voxel counts and the derived sampling weights."""

    counts: np.ndarray  # (N_c,) int64
    weights: np.ndarray  # (N_c,) float64
    beta: float

    @classmethod
    def compute(cls, label_grids, num_classes: int, beta: float = 0.25) -> "ClassStats":
        counts = class_frequencies(label_grids, num_classes)
        return cls(counts, sampling_weights(counts, beta), beta)


@dataclass
class SampleSet:
    """K sampled voxel positions with their ground-truth labels.

    ``labels`` may contain UNLABELED (-1) in sparse mode; such points carry no
    class and act only as mask negatives. ``indices`` are flat C-order ids
    into a grid of ``resolution``.
    """

    indices: np.ndarray  # (K,) int64
    labels: np.ndarray  # (K,) int64
    resolution: tuple[int, int, int]
    mode: str = "dense"


def class_frequencies(label_grids, num_classes: int) -> np.ndarray:
    """Count labeled voxels per class over a collection of label grids."""
    grids = list(label_grids)
    if not grids:
        raise ValueError("cannot compute class frequencies of an empty dataset")
    counts = np.zeros(num_classes, dtype=np.int64)
    for grid in grids:
        data = grid.data if isinstance(grid, VoxelGrid) else grid
        labels = np.asarray(data.reshape(-1).cpu() if torch.is_tensor(data) else data).ravel()
        labels = labels[labels != IGNORE_LABEL]
        counts += np.bincount(labels.astype(np.int64), minlength=num_classes)[:num_classes]
    return counts


def sampling_weights(counts: np.ndarray, beta: float) -> np.ndarray:
    """Inverse frequencies, min-normalized to 1, raised to the power beta.

    Classes absent from the training set get weight 0 and are never sampled.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    counts = np.asarray(counts, dtype=np.float64)
    positive = counts > 0
    if not positive.any():
        raise ValueError("all class counts are zero")
    inv = np.zeros_like(counts)
    inv[positive] = 1.0 / counts[positive]
    inv[positive] /= inv[positive].min()
    weights = np.zeros_like(counts)
    weights[positive] = inv[positive] ** beta
    return weights


def sample_points(
    label_grid: VoxelGrid,
    stats: ClassStats,
    k: int,
    rng: np.random.Generator,
    mode: str = "class_guided",
) -> SampleSet:
    """Draw K voxel positions (with replacement) from the label grid.

    Per-voxel weights are the class sampling weights (``class_guided``) or
    equal over labeled voxels (``uniform``); IGNORE voxels are never drawn.
    """
    if mode not in ("class_guided", "uniform"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    labels = np.asarray(label_grid.data.reshape(-1).cpu(), dtype=np.int64)
    valid = labels != IGNORE_LABEL
    if not valid.any():
        raise ValueError("label grid has no labeled voxel")
    if mode == "class_guided":
        weights = np.where(valid, stats.weights[np.clip(labels, 0, len(stats.weights) - 1)], 0.0)
    else:
        weights = valid.astype(np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("no voxel has positive sampling weight")
    idx = rng.choice(labels.size, size=k, replace=True, p=weights / total)
    return SampleSet(idx.astype(np.int64), labels[idx], label_grid.meta.resolution, mode="dense")


def sample_points_sparse(
    surface_points: torch.Tensor,
    labels: torch.Tensor,
    meta,
    k: int,
    rng: np.random.Generator,
) -> SampleSet:
    """K/2 voxelized surface points plus K/2 uniform random voxels (unlabeled)."""
    if k % 2:
        raise ValueError("sparse sampling needs an even K")
    if surface_points.numel() == 0:
        raise ValueError("no surface points to sample from")
    idx3 = meta.index_of(surface_points)
    in_bounds = meta.in_bounds(idx3)
    idx3 = idx3[in_bounds]
    pt_labels = np.asarray(labels, dtype=np.int64)[np.asarray(in_bounds)]
    if idx3.shape[0] == 0:
        raise ValueError("no surface point falls inside the grid")
    res = meta.resolution
    flat = np.asarray((idx3[:, 0] * res[1] + idx3[:, 1]) * res[2] + idx3[:, 2], dtype=np.int64)

    pick = rng.integers(0, flat.size, size=k // 2)
    rand_vox = rng.integers(0, meta.num_voxels, size=k // 2)
    indices = np.concatenate([flat[pick], rand_vox.astype(np.int64)])
    lab = np.concatenate([pt_labels[pick], np.full(k // 2, UNLABELED, dtype=np.int64)])
    return SampleSet(indices, lab, res, mode="sparse")


@dataclass(frozen=True)
class LossCoeffs:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1


def present_classes(samples: SampleSet) -> list[int]:
    """Classes with at least one labeled sampled point, ascending."""
    labeled = samples.labels[samples.labels != UNLABELED]
    return sorted(int(c) for c in np.unique(labeled))


def _mask_values_at_samples(pred: MaskPrediction, samples: SampleSet) -> torch.Tensor:
    """Per-query mask probabilities at the sampled label-grid positions, (N_q, K).

    The sampled indices address the label grid; each maps to its containing
    mask voxel (the mask resolution divides the label resolution).
    """
    lr = samples.resolution
    mr = pred.meta.resolution
    idx = samples.indices
    i = idx // (lr[1] * lr[2])
    j = (idx // lr[2]) % lr[1]
    kk = idx % lr[2]
    im = i * mr[0] // lr[0]
    jm = j * mr[1] // lr[1]
    km = kk * mr[2] // lr[2]
    flat = torch.from_numpy(((im * mr[1] + jm) * mr[2] + km).astype(np.int64))
    probs = pred.mask_probs.reshape(pred.mask_probs.shape[0], -1)
    return probs[:, flat]


def _point_bce_matrix(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Mean point BCE for every (prediction row, target row) pair."""
    k = p.shape[1]
    log_p = p.clamp(min=EPS).log()
    log_not = (1.0 - p).clamp(min=EPS).log()
    return -(log_p @ g.T + log_not @ (1.0 - g).T) / k


def _dice_matrix(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Smoothed Dice loss for every (prediction row, target row) pair."""
    inter = 2.0 * (p @ g.T)
    denom = p.sum(dim=1, keepdim=True) + g.sum(dim=1)
    return 1.0 - (inter + 1.0) / (denom + 1.0)


def matching_cost(
    pred: MaskPrediction,
    gt_classes: list[int],
    samples: SampleSet,
    coeffs: LossCoeffs = LossCoeffs(),
) -> torch.Tensor:
    """Query-to-segment cost: class term plus point BCE and Dice mask terms."""
    nq = pred.class_logits.shape[0]
    if not gt_classes:
        return pred.class_logits.new_zeros(nq, 0)
    p = _mask_values_at_samples(pred, samples)
    labels = torch.from_numpy(samples.labels)
    g = torch.stack([(labels == c) for c in gt_classes]).to(p.dtype)
    cls_cost = -pred.class_probs[:, gt_classes]
    return coeffs.cls * cls_cost + coeffs.bce * _point_bce_matrix(p, g) + coeffs.dice * _dice_matrix(p, g)


def hungarian_match(cost: torch.Tensor) -> list[int]:
    """Minimum-cost injective assignment of ground-truth segments to queries.

    Returns the query index for each segment (list of length N_gt). Among
    equally optimal assignments, picks the lexicographically smallest query
    sequence in segment order.
    """
    c = np.asarray(cost.detach().cpu(), dtype=np.float64)
    nq, ngt = c.shape
    if ngt == 0:
        return []
    if ngt > nq:
        raise ValueError(f"more segments ({ngt}) than queries ({nq})")
    rows, cols = linear_sum_assignment(c)
    best = c[rows, cols].sum()
    tol = 1e-9 * (1.0 + abs(best))

    chosen: list[int] = []
    available = list(range(nq))
    fixed = 0.0
    for j in range(ngt):
        for q in available:
            rest_q = [qq for qq in available if qq != q]
            rest_j = list(range(j + 1, ngt))
            if rest_j:
                sub = c[np.ix_(rest_q, rest_j)]
                r, cc = linear_sum_assignment(sub)
                rest = sub[r, cc].sum()
            else:
                rest = 0.0
            if fixed + c[q, j] + rest <= best + tol:
                chosen.append(q)
                available.remove(q)
                fixed += c[q, j]
                break
        else:  # numerically should not happen
            raise RuntimeError("failed to extend optimal assignment")
    return chosen


def mask_cls_loss(
    per_layer_preds: list[MaskPrediction],
    gt_classes: list[int],
    samples: SampleSet,
    assignment: list[int],
    coeffs: LossCoeffs = LossCoeffs(),
) -> torch.Tensor:
    """Deep-supervised classification + point-mask loss, averaged over layers.

    Matched queries are trained toward their segment class and mask; the rest
    toward no-object with a down-weighted cross-entropy. One assignment (from
    the final layer) is reused across all layers.
    """
    if len(assignment) != len(gt_classes):
        raise ValueError("assignment length must match segment count")
    labels = torch.from_numpy(samples.labels)
    layer_losses = []
    for pred in per_layer_preds:
        nq, nc_plus1 = pred.class_logits.shape
        no_object = nc_plus1 - 1
        target = torch.full((nq,), no_object, dtype=torch.long)
        for j, q in enumerate(assignment):
            target[q] = gt_classes[j]
        log_probs = pred.class_probs.clamp(min=EPS).log()
        class_w = torch.ones(nc_plus1, dtype=log_probs.dtype)
        class_w[no_object] = coeffs.no_object
        per_query_w = class_w[target]
        ce = -(log_probs[torch.arange(nq), target] * per_query_w).sum() / per_query_w.sum()

        loss = ce
        if gt_classes:
            p = _mask_values_at_samples(pred, samples)
            mask_terms = []
            for j, q in enumerate(assignment):
                g = (labels == gt_classes[j]).to(p.dtype).unsqueeze(0)
                pq = p[q].unsqueeze(0)
                bce = _point_bce_matrix(pq, g)[0, 0]
                dice = _dice_matrix(pq, g)[0, 0]
                mask_terms.append(coeffs.bce * bce + coeffs.dice * dice)
            loss = loss + torch.stack(mask_terms).mean()
        layer_losses.append(loss)
    return torch.stack(layer_losses).mean()


def total_loss(l_mask_cls: torch.Tensor, l_depth: torch.Tensor) -> torch.Tensor:
    return l_mask_cls + l_depth
