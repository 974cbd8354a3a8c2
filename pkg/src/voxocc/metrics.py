"""Evaluation: confusion matrix, SC IoU, SSC mIoU, and point-query labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import IGNORE_LABEL, VoxelGrid


@dataclass
class ConfusionMatrix:
    """Rows = ground truth, columns = prediction; IGNORE voxels excluded."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise ValueError("counts shape does not match num_classes")

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def _as_flat_int(labels) -> np.ndarray:
    if isinstance(labels, VoxelGrid):
        labels = labels.data
    if torch.is_tensor(labels):
        labels = labels.cpu().numpy()
    return np.asarray(labels, dtype=np.int64).ravel()


def accumulate(cm: ConfusionMatrix, pred_labels, gt_labels) -> ConfusionMatrix:
    """Add one (prediction, ground truth) pair of label volumes into the matrix."""
    pred = _as_flat_int(pred_labels)
    gt = _as_flat_int(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = gt != IGNORE_LABEL
    pred, gt = pred[keep], gt[keep]
    n = cm.num_classes
    binned = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    cm.counts += binned
    return cm


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; 0 where the class never appears in gt or prediction."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.zeros(cm.num_classes, dtype=np.float64)
    nz = denom > 0
    iou[nz] = tp[nz] / denom[nz]
    return iou


def ssc_miou(
    cm: ConfusionMatrix,
    semantic_class_ids: list[int],
    exclude_absent: bool = False,
) -> tuple[float, np.ndarray]:
    """Mean IoU over the semantic (non-free) classes, plus all per-class IoUs.

    A class absent from both gt and prediction scores 0 by default; with
    ``exclude_absent`` it is dropped from the mean instead.
    """
    iou = per_class_iou(cm)
    ids = list(semantic_class_ids)
    if exclude_absent:
        counts = cm.counts
        present = [
            c for c in ids if counts[c, :].sum() + counts[:, c].sum() > 0
        ]
        ids = present or ids
    mean = float(np.mean([iou[c] for c in ids])) if ids else 0.0
    return mean, iou


def sc_iou(cm_or_grids, free_class_id: int) -> float:
    """IoU of the binary occupied-vs-free problem (occupied = any non-free class)."""
    if isinstance(cm_or_grids, ConfusionMatrix):
        counts = cm_or_grids.counts
        occ = np.arange(counts.shape[0]) != free_class_id
        tp = counts[np.ix_(occ, occ)].sum()
        fp = counts[np.ix_(~occ, occ)].sum()
        fn = counts[np.ix_(occ, ~occ)].sum()
    else:
        pred, gt = cm_or_grids
        pred = _as_flat_int(pred)
        gt = _as_flat_int(gt)
        keep = gt != IGNORE_LABEL
        pred_occ = pred[keep] != free_class_id
        gt_occ = gt[keep] != free_class_id
        tp = int((pred_occ & gt_occ).sum())
        fp = int((pred_occ & ~gt_occ).sum())
        fn = int((~pred_occ & gt_occ).sum())
    denom = tp + fp + fn
    return float(tp / denom) if denom else 0.0


def point_query_segmentation(scores: VoxelGrid, points: torch.Tensor) -> torch.Tensor:
    """Label world-frame points by the argmax class of their containing voxel.

    Out-of-bounds points get IGNORE_LABEL. Nearest-voxel lookup, no
    interpolation.
    """
    labels_grid = scores.data.argmax(dim=0)
    idx = scores.meta.index_of(points)
    in_b = scores.meta.in_bounds(idx)
    out = torch.full((points.shape[0],), IGNORE_LABEL, dtype=torch.long)
    safe = idx.clamp(min=0)
    res = torch.tensor(scores.meta.resolution)
    safe = torch.minimum(safe, res - 1)
    vals = labels_grid[safe[:, 0], safe[:, 1], safe[:, 2]]
    out[in_b] = vals[in_b]
    return out


def render_report_text(report: dict) -> str:
    """Flat key = value rendering of a metrics report."""
    lines = []

    def emit(prefix, value):
        if isinstance(value, dict):
            for k, v in value.items():
                emit(f"{prefix}.{k}" if prefix else str(k), v)
        else:
            lines.append(f"{prefix} = {value}")

    emit("", report)
    return "\n".join(lines) + "\n"


def write_report(report: dict, json_path, text_path=None) -> None:
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    if text_path is not None:
        with open(text_path, "w") as f:
            f.write(render_report_text(report))


def load_report(json_path) -> dict:
    with open(json_path) as f:
        return json.load(f)
