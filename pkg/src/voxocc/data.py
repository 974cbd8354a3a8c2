"""Procedural miniature scenes: rasterization, ray-cast rendering, persistence.

Scenes are built from primitives (boxes, cylinders, spheres) snapped to a
coarse lattice of 2x2x2-voxel blocks, rasterized into a dense label grid,
and rendered into per-camera depth and class-color images by exact 3D-DDA
voxel traversal. Surface points are drawn on visible voxel entry faces.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .blobio import BlobFormatError, load_arrays, save_arrays
from .core import GridMeta, IGNORE_LABEL, Pose, VoxelGrid
from .view_transform import CameraView


class GeometryError(ValueError):
    """Invalid scene geometry (e.g. a camera inside solid voxels)."""


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]
    free_class_id: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "colors": [list(c) for c in self.colors],
            "free_class_id": self.free_class_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTable":
        return cls(
            tuple(d["names"]),
            tuple(tuple(c) for c in d["colors"]),
            d["free_class_id"],
        )


DEFAULT_CLASS_TABLE = ClassTable(
    names=("free", "road", "building", "car", "person", "pole", "vegetation", "terrain"),
    colors=(
        (0, 0, 0),
        (128, 64, 128),
        (241, 184, 68),
        (0, 150, 245),
        (255, 0, 0),
        (255, 240, 150),
        (0, 175, 0),
        (150, 240, 80),
    ),
    free_class_id=0,
)


@dataclass(frozen=True)
class Primitive:
    """A solid on the coarse lattice; center/size are in coarse-cell units.

    Boxes are axis-aligned; cylinders have a vertical axis with diameter
    size[0]; spheres use size[0] as diameter. Generators keep centers on the
    half-integer lattice and radii at half-integers so that membership tests
    at cell centers are exact.
    """

    kind: str  # box | cylinder | sphere
    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def membership(self, centers: np.ndarray) -> np.ndarray:
        d = centers - np.asarray(self.center)
        if self.kind == "box":
            half = np.asarray(self.size) / 2.0
            return (np.abs(d) <= half).all(axis=-1)
        if self.kind == "cylinder":
            r = self.size[0] / 2.0
            planar = d[..., 0] ** 2 + d[..., 1] ** 2 <= r * r
            return planar & (np.abs(d[..., 2]) <= self.size[2] / 2.0)
        if self.kind == "sphere":
            r = self.size[0] / 2.0
            return (d**2).sum(axis=-1) <= r * r
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class CameraSpec:
    intrinsics: np.ndarray  # (3, 3) float32
    rotation: np.ndarray  # (3, 3) float32, camera-to-world
    translation: np.ndarray  # (3,) float32
    width: int
    height: int


@dataclass
class SceneSpec:
    seed: int
    meta: GridMeta
    primitives: list[Primitive]
    cameras: list[CameraSpec]
    class_table: ClassTable = DEFAULT_CLASS_TABLE
    block: int = 2  # rasterization lattice: one coarse cell = block^3 voxels
    surface_samples: int = 256


@dataclass
class SceneSample:
    views: list[CameraView]
    surface_points: torch.Tensor  # (M, 3) float32, world frame
    surface_labels: torch.Tensor  # (M,) int64
    labels: VoxelGrid  # (1, X, Y, Z) int64


@dataclass
class SceneDataset:
    meta: GridMeta
    class_table: ClassTable
    samples: list[SceneSample]


def rasterize(spec: SceneSpec) -> np.ndarray:
    """Paint primitives onto the label grid; later primitives overwrite earlier."""
    res = spec.meta.resolution
    b = spec.block
    if any(r % b for r in res):
        raise ValueError(f"resolution {res} not divisible by block {b}")
    coarse = tuple(r // b for r in res)
    ii, jj, kk = np.meshgrid(*(np.arange(c) + 0.5 for c in coarse), indexing="ij")
    centers = np.stack([ii, jj, kk], axis=-1)
    labels = np.full(coarse, spec.class_table.free_class_id, dtype=np.int64)
    for prim in spec.primitives:
        if prim.class_id >= spec.class_table.num_classes:
            raise ValueError(f"primitive class {prim.class_id} outside the class table")
        labels[prim.membership(centers)] = prim.class_id
    return labels.repeat(b, axis=0).repeat(b, axis=1).repeat(b, axis=2)


def _camera_rays(cam: CameraSpec) -> np.ndarray:
    """World-frame direction per pixel with unit camera-z, (H, W, 3) float64."""
    k = np.asarray(cam.intrinsics, dtype=np.float64)
    kinv = np.linalg.inv(k)
    us = np.arange(cam.width, dtype=np.float64) + 0.5
    vs = np.arange(cam.height, dtype=np.float64) + 0.5
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    dirs_cam = pix @ kinv.T
    return dirs_cam @ np.asarray(cam.rotation, dtype=np.float64).T


def _dda_first_hit(occupied: np.ndarray, origin: np.ndarray, dirs: np.ndarray, meta: GridMeta):
    """First occupied voxel along each ray by exact 3D-DDA stepping.

    Returns (t, cell, axis, side, hit): entry ray parameter, voxel index,
    entry-face axis and side (0 = low face), and a hit flag per ray.
    """
    r = dirs.shape[0]
    o = np.asarray(meta.origin, dtype=np.float64)
    vs = np.asarray(meta.voxel_size, dtype=np.float64)
    res = np.asarray(meta.resolution)
    lo, hi = o, o + res * vs

    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origin) / dirs
        t_hi = (hi - origin) / dirs
    t_near = np.fmin(t_lo, t_hi)
    t_far = np.fmax(t_lo, t_hi)
    t_near = np.where(np.isnan(t_near), -np.inf, t_near)
    t_far = np.where(np.isnan(t_far), np.inf, t_far)
    t_enter = t_near.max(axis=1)
    enter_axis = t_near.argmax(axis=1)
    t_exit = t_far.min(axis=1)

    t0 = np.maximum(t_enter, 0.0)
    active = (t_exit > t0) & (t_exit > 0)
    inside_start = t_enter < 0  # origin inside the grid: no entry face

    p0 = origin + (t0[:, None] + 1e-9) * dirs
    cell = np.floor((p0 - o) / vs).astype(np.int64)
    cell = np.clip(cell, 0, res - 1)

    step = np.where(dirs > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.abs(vs / dirs)
    next_bound = o + (cell + (dirs > 0)) * vs
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = (next_bound - origin) / dirs
    t_max = np.where(np.isfinite(t_max), t_max, np.inf)

    t_cur = t0.copy()
    cur_axis = enter_axis.copy()
    cur_axis[inside_start] = -1
    hit = np.zeros(r, dtype=bool)
    out_t = np.zeros(r)
    out_cell = np.zeros((r, 3), dtype=np.int64)
    out_axis = np.zeros(r, dtype=np.int64)
    out_side = np.zeros(r, dtype=np.int64)

    max_steps = int(res.sum()) + 3
    for _ in range(max_steps):
        if not active.any():
            break
        safe = np.clip(cell, 0, res - 1)  # inactive rays may sit out of bounds
        occ_now = active & occupied[safe[:, 0], safe[:, 1], safe[:, 2]]
        newly = occ_now & (cur_axis >= 0)  # a hit needs an entry face
        if newly.any():
            hit[newly] = True
            out_t[newly] = t_cur[newly]
            out_cell[newly] = cell[newly]
            out_axis[newly] = cur_axis[newly]
            out_side[newly] = (step[newly, cur_axis[newly]] < 0).astype(np.int64)
            active &= ~newly
        if not active.any():
            break
        axis = t_max.argmin(axis=1)
        t_cur = np.where(active, t_max[np.arange(r), axis], t_cur)
        cur_axis = np.where(active, axis, cur_axis)
        move = np.zeros((r, 3), dtype=np.int64)
        move[np.arange(r), axis] = step[np.arange(r), axis]
        cell = cell + np.where(active[:, None], move, 0)
        t_max[np.arange(r), axis] += np.where(active, t_delta[np.arange(r), axis], 0.0)
        active &= (cell >= 0).all(axis=1) & (cell < res).all(axis=1)
    return out_t, out_cell, out_axis, out_side, hit


def generate_scene(spec: SceneSpec) -> SceneSample:
    """Rasterize, render every camera, and sample visible surface points."""
    labels = rasterize(spec)
    meta = spec.meta
    free = spec.class_table.free_class_id
    occupied = labels != free
    colors = np.asarray(spec.class_table.colors, dtype=np.float64) / 255.0
    o = np.asarray(meta.origin)
    vs = np.asarray(meta.voxel_size)

    views = []
    face_records = []
    for cam in spec.cameras:
        origin = np.asarray(cam.translation, dtype=np.float64)
        cam_cell = np.floor((origin - o) / vs).astype(np.int64)
        if ((cam_cell >= 0).all() and (cam_cell < meta.resolution).all()
                and occupied[tuple(cam_cell)]):
            raise GeometryError(f"camera at {origin.tolist()} is inside solid geometry")
        dirs = _camera_rays(cam).reshape(-1, 3)
        t, cell, axis, side, hit = _dda_first_hit(occupied, origin, dirs, meta)

        depth = np.where(hit, t, 0.0).reshape(cam.height, cam.width)
        image = np.zeros((cam.height, cam.width, 3))
        if hit.any():
            cls = labels[cell[hit, 0], cell[hit, 1], cell[hit, 2]]
            shade = 1.0 / (1.0 + 0.25 * t[hit])
            flat_img = image.reshape(-1, 3)
            flat_img[hit] = colors[cls] * shade[:, None]
            face_records.append(
                np.concatenate([cell[hit], axis[hit, None], side[hit, None]], axis=1)
            )
        views.append(
            CameraView(
                intrinsics=torch.from_numpy(np.asarray(cam.intrinsics, dtype=np.float32)),
                pose=Pose(
                    torch.from_numpy(np.asarray(cam.rotation, dtype=np.float32)),
                    torch.from_numpy(np.asarray(cam.translation, dtype=np.float32)),
                ),
                image=torch.from_numpy(
                    image.transpose(2, 0, 1).astype(np.float32)
                ),
                gt_depth=torch.from_numpy(depth.astype(np.float32)),
            )
        )

    rng = np.random.default_rng(spec.seed)
    if face_records:
        faces = np.unique(np.concatenate(face_records), axis=0)
    else:
        faces = np.zeros((0, 5), dtype=np.int64)
    m = spec.surface_samples if len(faces) else 0
    points = np.zeros((m, 3), dtype=np.float64)
    point_labels = np.zeros(m, dtype=np.int64)
    if m:
        picks = rng.integers(0, len(faces), size=m)
        jitter = rng.uniform(0.05, 0.95, size=(m, 2))
        for n, f in enumerate(faces[picks]):
            cell = f[:3]
            axis_id, side_id = int(f[3]), int(f[4])
            tangent = [a for a in range(3) if a != axis_id]
            pos = np.empty(3)
            for ti, a in enumerate(tangent):
                pos[a] = o[a] + (cell[a] + jitter[n, ti]) * vs[a]
            inset = 0.02
            face_coord = cell[axis_id] + (1.0 - inset if side_id else inset)
            pos[axis_id] = o[axis_id] + face_coord * vs[axis_id]
            points[n] = pos
            point_labels[n] = labels[tuple(cell)]

    return SceneSample(
        views=views,
        surface_points=torch.from_numpy(points.astype(np.float32)),
        surface_labels=torch.from_numpy(point_labels),
        labels=VoxelGrid(meta, torch.from_numpy(labels).unsqueeze(0)),
    )


def _mirror_constant(meta: GridMeta, axis: int) -> float:
    return 2.0 * meta.origin[axis] + meta.extent[axis]


def flip_spec(spec: SceneSpec, axis: int) -> SceneSpec:
    """Mirror a scene description along world axis X (0) or Y (1)."""
    if axis not in (0, 1):
        raise ValueError("flip axis must be 0 (X) or 1 (Y)")
    coarse = spec.meta.resolution[axis] / spec.block
    prims = []
    for p in spec.primitives:
        center = list(p.center)
        center[axis] = coarse - center[axis]
        prims.append(replace(p, center=tuple(center)))
    cams = [_flip_camera(c, spec.meta, axis) for c in spec.cameras]
    return replace(spec, primitives=prims, cameras=cams)


def _flip_camera(cam: CameraSpec, meta: GridMeta, axis: int) -> CameraSpec:
    f_world = np.eye(3)
    f_world[axis, axis] = -1.0
    shift = np.zeros(3)
    shift[axis] = _mirror_constant(meta, axis)
    f_img = np.diag([-1.0, 1.0, 1.0])  # flip the camera x axis
    rot = f_world @ np.asarray(cam.rotation, dtype=np.float64) @ f_img
    trans = f_world @ np.asarray(cam.translation, dtype=np.float64) + shift
    k = np.asarray(cam.intrinsics, dtype=np.float64).copy()
    k[0, 2] = cam.width - k[0, 2]
    return CameraSpec(
        k.astype(np.float32),
        rot.astype(np.float32),
        trans.astype(np.float32),
        cam.width,
        cam.height,
    )


def flip_3d(sample: SceneSample, axis: int) -> SceneSample:
    """Mirror a generated sample along world axis X (0) or Y (1).

    The label grid, surface points, and camera poses are mirrored coherently;
    rendered images become horizontal mirrors (cameras flip their own x axis
    so rotations stay proper).
    """
    if axis not in (0, 1):
        raise ValueError("flip axis must be 0 (X) or 1 (Y)")
    meta = sample.labels.meta
    mirrored = torch.flip(sample.labels.data, dims=[axis + 1])

    points = sample.surface_points.clone()
    points[:, axis] = _mirror_constant(meta, axis) - points[:, axis]

    f_world = torch.zeros(3, 3, dtype=torch.float64)
    f_world[0, 0], f_world[1, 1], f_world[2, 2] = 1.0, 1.0, 1.0
    f_world[axis, axis] = -1.0
    f_img = torch.diag(torch.tensor([-1.0, 1.0, 1.0], dtype=torch.float64))
    shift = torch.zeros(3, dtype=torch.float64)
    shift[axis] = _mirror_constant(meta, axis)

    views = []
    for v in sample.views:
        w_px = v.image.shape[-1]
        k = v.intrinsics.double().clone()
        k[0, 2] = w_px - k[0, 2]
        rot = f_world @ v.pose.rotation.double() @ f_img
        trans = f_world @ v.pose.translation.double() + shift
        views.append(
            CameraView(
                intrinsics=k.float(),
                pose=Pose(rot.float(), trans.float()),
                image=torch.flip(v.image, dims=[-1]),
                gt_depth=None if v.gt_depth is None else torch.flip(v.gt_depth, dims=[-1]),
            )
        )
    return SceneSample(views, points, sample.surface_labels.clone(),
                       VoxelGrid(meta, mirrored))


def default_camera_rig(
    meta: GridMeta, width: int = 64, height: int = 48, num_cameras: int = 2
) -> list[CameraSpec]:
    """Cameras near the low-X edge looking along +X, spread across Y."""
    fx = width / 2.0
    k = np.array(
        [[fx, 0.0, width / 2.0], [0.0, fx, height / 2.0], [0.0, 0.0, 1.0]], dtype=np.float32
    )
    # camera axes (x right, y down, z forward) -> world (X fwd, Y left, Z up)
    rot = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]], dtype=np.float32)
    ox, oy, _ = meta.origin
    ex, ey, _ = meta.extent
    cams = []
    for n in range(num_cameras):
        y = oy + ey * (n + 1) / (num_cameras + 1)
        trans = np.array([ox + 0.3, y, 1.1], dtype=np.float32)
        cams.append(CameraSpec(k, rot, trans, width, height))
    return cams


def make_random_scene_spec(
    seed: int,
    meta: GridMeta | None = None,
    class_table: ClassTable = DEFAULT_CLASS_TABLE,
    cameras: list[CameraSpec] | None = None,
    surface_samples: int = 256,
) -> SceneSpec:
    """Random miniature street scene: ground, buildings, cars, rare thin objects.

    Primitive placement is snapped to the coarse lattice (half-integer centers,
    half-integer radii) so rasterization and flips are exact.
    """
    meta = meta or GridMeta((32, 32, 8), (0.25, 0.25, 0.25), (0.0, 0.0, 0.0))
    rng = np.random.default_rng(seed)
    cx, cy, cz = (r // 2 for r in meta.resolution)  # coarse lattice extents

    prims = [
        Primitive("box", 7, (cx / 2, cy / 2, 0.5), (cx, cy, 1.0)),  # terrain ground
    ]
    road_w = int(rng.integers(3, 6))
    road_j = int(rng.integers(1, cy - road_w - 1))
    prims.append(
        Primitive("box", 1, (cx / 2, road_j + road_w / 2, 0.5), (cx, road_w, 1.0))
    )

    def spot(margin_x=2, margin_y=1):
        # keep a clear strip near the cameras (low x)
        return (
            int(rng.integers(4, cx - margin_x)),
            int(rng.integers(margin_y, cy - margin_y)),
        )

    for _ in range(int(rng.integers(1, 3))):  # buildings
        w, d = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        h = int(rng.integers(2, cz + 1))
        x, y = spot(margin_x=max(2, w // 2 + 1))
        prims.append(Primitive("box", 2, (x + 0.5, y + 0.5, 1 + h / 2), (w, d, h)))
    for _ in range(int(rng.integers(1, 3))):  # vegetation blobs
        x, y = spot()
        r = 1.5 if rng.random() < 0.7 else 2.5
        prims.append(Primitive("sphere", 6, (x + 0.5, y + 0.5, 1.5), (2 * r, 2 * r, 2 * r)))
    for _ in range(int(rng.integers(1, 3))):  # cars
        x, y = spot()
        prims.append(Primitive("box", 3, (x + 0.5, y + 0.5, 1.5), (2, 1, 1)))
    for _ in range(int(rng.integers(1, 3))):  # poles
        x, y = spot()
        h = int(rng.integers(2, cz))
        prims.append(Primitive("cylinder", 5, (x + 0.5, y + 0.5, 1 + h / 2), (1, 1, h)))
    for _ in range(int(rng.integers(1, 3))):  # persons
        x, y = spot()
        prims.append(Primitive("cylinder", 4, (x + 0.5, y + 0.5, 1.5), (1, 1, 1)))

    return SceneSpec(
        seed=seed,
        meta=meta,
        primitives=prims,
        cameras=cameras if cameras is not None else default_camera_rig(meta),
        class_table=class_table,
        surface_samples=surface_samples,
    )


MANIFEST_NAME = "manifest.json"


def save_dataset(dataset: SceneDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sample in enumerate(dataset.samples):
        name = f"sample_{i:05d}.bin"
        arrays = {
            "labels": sample.labels.data[0].numpy().astype(np.uint8),
            "surface_points": sample.surface_points.numpy().astype(np.float32),
            "surface_labels": sample.surface_labels.numpy().astype(np.uint8),
            "n_views": np.array([len(sample.views)], dtype=np.int64),
        }
        for v, view in enumerate(sample.views):
            arrays[f"view{v}_image"] = view.image.numpy().astype(np.float32)
            arrays[f"view{v}_depth"] = view.gt_depth.numpy().astype(np.float32)
            arrays[f"view{v}_intrinsics"] = view.intrinsics.numpy().astype(np.float32)
            arrays[f"view{v}_rotation"] = view.pose.rotation.numpy().astype(np.float32)
            arrays[f"view{v}_translation"] = view.pose.translation.numpy().astype(np.float32)
        save_arrays(path / name, arrays)
        names.append(name)
    manifest = {
        "version": 1,
        "class_table": dataset.class_table.to_dict(),
        "grid": {
            "resolution": list(dataset.meta.resolution),
            "voxel_size": list(dataset.meta.voxel_size),
            "origin": list(dataset.meta.origin),
        },
        "samples": names,
    }
    with open(path / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> SceneDataset:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise BlobFormatError(f"no {MANIFEST_NAME} in {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != 1:
        raise BlobFormatError(f"unsupported dataset version {manifest.get('version')}")
    meta = GridMeta(
        tuple(manifest["grid"]["resolution"]),
        tuple(manifest["grid"]["voxel_size"]),
        tuple(manifest["grid"]["origin"]),
    )
    class_table = ClassTable.from_dict(manifest["class_table"])
    samples = []
    for name in manifest["samples"]:
        arrays = load_arrays(path / name)
        views = []
        for v in range(int(arrays["n_views"][0])):
            views.append(
                CameraView(
                    intrinsics=torch.from_numpy(arrays[f"view{v}_intrinsics"]),
                    pose=Pose(
                        torch.from_numpy(arrays[f"view{v}_rotation"]),
                        torch.from_numpy(arrays[f"view{v}_translation"]),
                    ),
                    image=torch.from_numpy(arrays[f"view{v}_image"]),
                    gt_depth=torch.from_numpy(arrays[f"view{v}_depth"]),
                )
            )
        samples.append(
            SceneSample(
                views=views,
                surface_points=torch.from_numpy(arrays["surface_points"]),
                surface_labels=torch.from_numpy(
                    arrays["surface_labels"].astype(np.int64)
                ),
                labels=VoxelGrid(
                    meta, torch.from_numpy(arrays["labels"].astype(np.int64)).unsqueeze(0)
                ),
            )
        )
    return SceneDataset(meta, class_table, samples)
