"""Training, evaluation, and checkpoint orchestration for the CLI."""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .blobio import BlobFormatError, load_arrays, save_arrays
from .config import RunConfig
from .core import GridMeta
from .data import ClassTable, SceneDataset, flip_3d
from .metrics import ConfusionMatrix, accumulate, per_class_iou, sc_iou, ssc_miou, point_query_segmentation
from .model import OccupancyModel, ModelOutput
from .occ_decoder import compose_occupancy, upsample_prediction
from .training import (
    ClassStats,
    LossCoeffs,
    hungarian_match,
    mask_cls_loss,
    matching_cost,
    present_classes,
    sample_points,
    sample_points_sparse,
    total_loss,
)
from .view_transform import DepthBins, depth_bce_loss, depth_targets


def set_determinism(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)


def feature_meta(cfg: RunConfig, data_meta: GridMeta) -> GridMeta:
    """Feature-volume grid covering the dataset's world box at the configured resolution."""
    res = cfg.volume_resolution
    vs = tuple(e / r for e, r in zip(data_meta.extent, res))
    return GridMeta(res, vs, data_meta.origin)


def build_model(cfg: RunConfig, data_meta: GridMeta, num_classes: int) -> OccupancyModel:
    bins = DepthBins(cfg.depth_bins.d_min, cfg.depth_bins.d_max, cfg.depth_bins.count)
    return OccupancyModel(
        volume_meta=feature_meta(cfg, data_meta),
        num_classes=num_classes,
        bins=bins,
        backbone_width=cfg.backbone.width,
        backbone_stride=cfg.backbone.stride,
        context_channels=cfg.backbone.context_channels,
        encoder_cfg=cfg.encoder,
        pixel_cfg=cfg.pixel_decoder,
        num_queries=cfg.decoder.num_queries,
        decoder_layers=cfg.decoder.layers,
        decoder_heads=cfg.decoder.heads,
        pooling_mode=cfg.decoder.pooling_mode,
    )


def loss_coeffs(cfg: RunConfig) -> LossCoeffs:
    t = cfg.training
    return LossCoeffs(t.lambda_cls, t.lambda_bce, t.lambda_dice, t.no_object_weight)


def sample_supervision(sample, stats: ClassStats, cfg: RunConfig, rng: np.random.Generator):
    t = cfg.training
    if t.supervision == "sparse":
        return sample_points_sparse(
            sample.surface_points.double(),
            sample.surface_labels,
            sample.labels.meta,
            t.points_per_sample,
            rng,
        )
    return sample_points(sample.labels, stats, t.points_per_sample, rng, mode=t.sampling_mode)


def compute_losses(out: ModelOutput, sample, samples, cfg: RunConfig, model: OccupancyModel):
    coeffs = loss_coeffs(cfg)
    segments = present_classes(samples)
    cost = matching_cost(out.final, segments, samples, coeffs)
    assignment = hungarian_match(cost) if segments else []
    l_mask = mask_cls_loss(out.per_layer, segments, samples, assignment, coeffs)

    one_hots, valids = [], []
    for view in sample.views:
        oh, va = depth_targets(view, model.bins, model.backbone.stride)
        one_hots.append(oh)
        valids.append(va)
    l_depth = depth_bce_loss(out.depth_logits, torch.stack(one_hots), torch.stack(valids))
    return total_loss(l_mask, l_depth), l_mask, l_depth


def _np_rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _np_rng_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }
    return rng


def save_checkpoint(
    path,
    model: OccupancyModel,
    optimizer: torch.optim.Optimizer,
    np_rng: np.random.Generator,
    step: int,
    cfg: RunConfig,
    class_table: ClassTable,
    data_meta: GridMeta,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    weights = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_arrays(path / "weights.bin", weights)

    opt_arrays = {"torch_rng_state": torch.get_rng_state().numpy().astype(np.uint8)}
    for i, p in enumerate(optimizer.param_groups[0]["params"]):
        state = optimizer.state.get(p, {})
        if state:
            opt_arrays[f"p{i}.step"] = np.asarray(
                [int(state["step"].item() if torch.is_tensor(state["step"]) else state["step"])],
                dtype=np.int64,
            )
            opt_arrays[f"p{i}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
            opt_arrays[f"p{i}.exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(np.float32)
    save_arrays(path / "optim.bin", opt_arrays)

    manifest = {
        "version": 1,
        "kind": "checkpoint",
        "step": step,
        "config": cfg.to_dict(),
        "class_table": class_table.to_dict(),
        "grid": {
            "resolution": list(data_meta.resolution),
            "voxel_size": list(data_meta.voxel_size),
            "origin": list(data_meta.origin),
        },
        "np_rng": _np_rng_state_to_json(np_rng),
    }
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise BlobFormatError(f"no manifest.json in checkpoint {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("kind") != "checkpoint" or manifest.get("version") != 1:
        raise BlobFormatError(f"{path} is not a version-1 checkpoint")
    weights = load_arrays(path / "weights.bin")
    optim = load_arrays(path / "optim.bin")
    return manifest, weights, optim


def restore_model(manifest: dict, weights: dict) -> tuple[OccupancyModel, RunConfig, ClassTable, GridMeta]:
    cfg = config_mod.from_dict(manifest["config"])
    class_table = ClassTable.from_dict(manifest["class_table"])
    grid = manifest["grid"]
    data_meta = GridMeta(
        tuple(grid["resolution"]), tuple(grid["voxel_size"]), tuple(grid["origin"])
    )
    model = build_model(cfg, data_meta, class_table.num_classes)
    state = {k: torch.from_numpy(v.copy()) for k, v in weights.items()}
    model.load_state_dict(state)
    return model, cfg, class_table, data_meta


def train(
    cfg: RunConfig,
    dataset: SceneDataset,
    out_dir,
    resume=None,
    log=print,
) -> dict:
    """Train on a dataset; writes checkpoints and a loss CSV into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not dataset.samples:
        raise ValueError("dataset is empty")
    set_determinism(cfg.seed, cfg.threads)

    num_classes = dataset.class_table.num_classes
    stats = ClassStats.compute(
        [s.labels for s in dataset.samples], num_classes, cfg.training.beta
    )
    model = build_model(cfg, dataset.meta, num_classes)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.training.lr, weight_decay=cfg.training.weight_decay
    )
    milestones = sorted(
        max(1, int(round(m * cfg.training.steps))) for m in cfg.training.lr_milestones
    )
    np_rng = np.random.default_rng(cfg.seed)
    start_step = 0
    if resume is not None:
        manifest, weights, optim = load_checkpoint(resume)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in weights.items()})
        for i, p in enumerate(optimizer.param_groups[0]["params"]):
            if f"p{i}.exp_avg" in optim:
                optimizer.state[p] = {
                    "step": torch.tensor(float(optim[f"p{i}.step"][0])),
                    "exp_avg": torch.from_numpy(optim[f"p{i}.exp_avg"].copy()).reshape(p.shape),
                    "exp_avg_sq": torch.from_numpy(
                        optim[f"p{i}.exp_avg_sq"].copy()
                    ).reshape(p.shape),
                }
        torch.set_rng_state(torch.from_numpy(optim["torch_rng_state"].copy()))
        np_rng = _np_rng_from_json(manifest["np_rng"])
        start_step = int(manifest["step"])
    for group in optimizer.param_groups:
        group.setdefault("initial_lr", cfg.training.lr)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=milestones, gamma=cfg.training.lr_gamma,
        last_epoch=start_step - 1,
    )

    n = len(dataset.samples)
    batch = min(cfg.training.batch_size, n)
    rows = []
    model.train()
    for step in range(start_step, cfg.training.steps):
        idxs = np_rng.choice(n, size=batch, replace=False)
        losses, mask_parts, depth_parts = [], [], []
        for i in idxs:
            sample = dataset.samples[int(i)]
            if cfg.training.flip_augment and np_rng.random() < 0.5:
                sample = flip_3d(sample, int(np_rng.integers(0, 2)))
            points = sample_supervision(sample, stats, cfg, np_rng)
            out = model(sample.views)
            l_total, l_mask, l_depth = compute_losses(out, sample, points, cfg, model)
            losses.append(l_total)
            mask_parts.append(l_mask.item())
            depth_parts.append(l_depth.item())
        loss = torch.stack(losses).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        rows.append(
            {
                "step": step,
                "loss": loss.item(),
                "mask_cls": float(np.mean(mask_parts)),
                "depth": float(np.mean(depth_parts)),
                "lr": optimizer.param_groups[0]["lr"],
            }
        )
        if cfg.training.log_every and step % cfg.training.log_every == 0:
            log(f"step {step}: loss {loss.item():.4f}")
        if cfg.training.checkpoint_every and (step + 1) % cfg.training.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"ckpt_{step + 1:06d}", model, optimizer, np_rng, step + 1,
                cfg, dataset.class_table, dataset.meta,
            )

    save_checkpoint(
        out_dir / "ckpt_final", model, optimizer, np_rng, cfg.training.steps,
        cfg, dataset.class_table, dataset.meta,
    )
    with open(out_dir / "loss.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "loss", "mask_cls", "depth", "lr"])
        writer.writeheader()
        writer.writerows(rows)
    return {"steps": cfg.training.steps, "final_loss": rows[-1]["loss"] if rows else None,
            "checkpoint": str(out_dir / "ckpt_final"), "loss_rows": rows}


def predict_labels(model: OccupancyModel, sample, data_meta: GridMeta):
    """Forward one sample and upsample the composed scores to the label grid."""
    with torch.no_grad():
        out = model(sample.views)
    scores, _ = compose_occupancy(out.final)
    ratios = {d // v for d, v in zip(data_meta.resolution, scores.meta.resolution)}
    exact = all(
        d % v == 0 for d, v in zip(data_meta.resolution, scores.meta.resolution)
    )
    if not exact or len(ratios) != 1:
        raise ValueError(
            f"label grid {data_meta.resolution} is not an integer multiple of the "
            f"prediction grid {scores.meta.resolution}"
        )
    up = upsample_prediction(scores, ratios.pop())
    labels = up.data.argmax(dim=0)
    return up, labels


def evaluate(
    model: OccupancyModel,
    dataset: SceneDataset,
    with_points: bool = False,
) -> dict:
    """SC IoU and SSC mIoU over a dataset; optionally point-query metrics."""
    model.eval()
    table = dataset.class_table
    num_classes = table.num_classes
    free = table.free_class_id
    semantic_ids = [c for c in range(num_classes) if c != free]
    cm = ConfusionMatrix(num_classes)
    point_cm = ConfusionMatrix(num_classes)
    for sample in dataset.samples:
        up_scores, pred_labels = predict_labels(model, sample, dataset.meta)
        accumulate(cm, pred_labels, sample.labels.data[0])
        if with_points and sample.surface_points.shape[0]:
            pt_labels = point_query_segmentation(up_scores, sample.surface_points.double())
            accumulate(point_cm, pt_labels, sample.surface_labels)
    miou, iou = ssc_miou(cm, semantic_ids)
    report = {
        "num_scenes": len(dataset.samples),
        "sc_iou": sc_iou(cm, free),
        "ssc_miou": miou,
        "per_class_iou": {table.names[c]: float(iou[c]) for c in semantic_ids},
        "free_class": table.names[free],
    }
    if with_points:
        p_miou, p_iou = ssc_miou(point_cm, semantic_ids)
        report["point_miou"] = p_miou
        report["point_per_class_iou"] = {table.names[c]: float(p_iou[c]) for c in semantic_ids}
    return report


VARIANT_AXES = {
    "pooling": ("max", "trilinear"),
    "sampling": ("class_guided", "uniform"),
    "encoder": ("dual_path", "local_only", "global_only", "conv3d"),
    "soft_sum": ("on", "off"),
    "shared_attention": ("on", "off"),
    "aspp": ("on", "off"),
    "aug3d": ("on", "off"),
}


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Apply a comma-separated list of toggle=value pairs to a config."""
    if not variant:
        return cfg
    enc = cfg.encoder
    training = cfg.training
    decoder = cfg.decoder
    for part in variant.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"variant item {part!r} is not key=value")
        key, value = (s.strip() for s in part.split("=", 1))
        if key not in VARIANT_AXES:
            raise ValueError(f"unknown variant axis {key!r}; known: {sorted(VARIANT_AXES)}")
        if value not in VARIANT_AXES[key]:
            raise ValueError(f"variant {key}={value!r}; allowed: {VARIANT_AXES[key]}")
        flag = value == "on"
        if key == "pooling":
            decoder = replace(decoder, pooling_mode=value)
        elif key == "sampling":
            training = replace(training, sampling_mode=value)
        elif key == "encoder":
            enc = replace(enc, variant=value)
        elif key == "soft_sum":
            enc = replace(enc, use_soft_sum=flag)
        elif key == "shared_attention":
            enc = replace(enc, use_shared_attention=flag)
        elif key == "aspp":
            enc = replace(enc, use_aspp=flag)
        elif key == "aug3d":
            training = replace(training, flip_augment=flag)
    return replace(cfg, encoder=enc, training=training, decoder=decoder)


def export_ply(labels: torch.Tensor, meta: GridMeta, class_table: ClassTable, path) -> int:
    """ASCII PLY with one colored point per non-free predicted voxel center."""
    free = class_table.free_class_id
    occupied = (labels != free).nonzero()
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {occupied.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    centers = meta.world_of(occupied)
    for row in range(occupied.shape[0]):
        cls = int(labels[tuple(occupied[row])])
        r, g, b = class_table.colors[cls]
        x, y, z = (float(c) for c in centers[row])
        lines.append(f"{x} {y} {z} {r} {g} {b}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return occupied.shape[0]
