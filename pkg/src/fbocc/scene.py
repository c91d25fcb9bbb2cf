"""Synthetic scenes with exact ground truth.

A scene is a list of boxes and ground slabs in a world frame, a camera rig
mounted on the ego vehicle and an ego trajectory. From it we rasterize voxel
labels, ray-march depth/semantic images, derive camera visibility masks and
paint simple RGB images for the encoder.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classes import CLASS_NAMES, FREE
from .geometry import CameraModel, LidarFrame, RigidTransform, VoxelGridSpec, rig_to_json, ring_rig
from .occ_head import OccupancyGrid

MISS_DEPTH = -1.0
MISS_LABEL = 255
KINDS = ("box", "ground-plane")


@dataclass(frozen=True, eq=False)
class Primitive:
    """Box (oriented by ``pose``) or an infinite horizontal slab.

    For a ground plane only ``size[2]`` (thickness) and the pose's z matter.
    Containment is half-open: ``-size/2 <= local < size/2``.
    """

    kind: str
    pose: RigidTransform
    size: tuple
    class_id: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        size = tuple(float(s) for s in self.size)
        if len(size) != 3 or min(size) <= 0:
            raise ValueError("primitive dimensions must be three positive numbers")
        if not 0 <= int(self.class_id) < FREE:
            raise ValueError(f"primitive class must lie in [0, {FREE - 1}]")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "class_id", int(self.class_id))

    @classmethod
    def box(cls, center, size, class_id, yaw=0.0) -> "Primitive":
        return cls("box", RigidTransform.from_yaw(yaw, center), size, class_id)

    @classmethod
    def ground(cls, z_top, thickness, class_id) -> "Primitive":
        return cls("ground-plane", RigidTransform(translation=(0, 0, z_top - thickness / 2)), (1.0, 1.0, thickness), class_id)

    def contains(self, points) -> np.ndarray:
        local = self.pose.inverse().apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        half = np.array(self.size) / 2
        if self.kind == "ground-plane":
            return (local[:, 2] >= -half[2]) & (local[:, 2] < half[2])
        return np.all((local >= -half) & (local < half), axis=1)

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.pose.to_json(), "size": list(self.size), "class": self.class_id}

    @classmethod
    def from_json(cls, obj) -> "Primitive":
        cid = obj["class"]
        if isinstance(cid, str):
            cid = CLASS_NAMES.index(cid)
        return cls(obj["kind"], RigidTransform.from_json(obj), tuple(obj["size"]), cid)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    primitives: list
    rig: list
    ego_trajectory: list = field(default_factory=lambda: [RigidTransform()])
    grid: VoxelGridSpec = None

    def __post_init__(self):
        if not self.rig:
            raise ValueError("scene needs at least one camera")
        if not self.ego_trajectory:
            raise ValueError("scene needs at least one ego pose")

    def to_json(self) -> dict:
        out = {
            "cameras": rig_to_json(self.rig),
            "primitives": [p.to_json() for p in self.primitives],
            "ego_trajectory": [p.to_json() for p in self.ego_trajectory],
        }
        if self.grid is not None:
            out["grid"] = self.grid.to_json()
        return out

    @classmethod
    def from_json(cls, obj) -> "SceneSpec":
        return cls(
            [Primitive.from_json(p) for p in obj.get("primitives", [])],
            [CameraModel.from_json(c) for c in obj["cameras"]],
            [RigidTransform.from_json(p) for p in obj.get("ego_trajectory", [])] or [RigidTransform()],
            VoxelGridSpec.from_json(obj["grid"]) if "grid" in obj else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def rasterize_scene(spec: SceneSpec, grid: VoxelGridSpec, frame: int = 0) -> np.ndarray:
    """Voxel labels in the ego frame of ``frame``; later primitives win overlaps."""
    world = spec.ego_trajectory[frame].apply(grid.centers().reshape(-1, 3))
    labels = np.full(len(world), FREE, dtype=np.int64)
    for prim in spec.primitives:
        labels[prim.contains(world)] = prim.class_id
    return labels.reshape(grid.shape)


def _march(labels, grid: VoxelGridSpec, origin, directions, t_max, step, visited=None):
    """First occupied sample along rays ``origin + t * direction`` (unit directions).

    Returns ``(t_hit, label)`` with ``t_hit = nan`` on a miss. ``visited``, a
    flat bool array over the grid, collects every voxel sampled up to and
    including the hit.
    """
    n = len(directions)
    t_hit = np.full(n, np.nan)
    lab = np.full(n, MISS_LABEL, dtype=np.int64)
    active = np.arange(n)
    k = 1
    while active.size and k * step <= t_max:
        t = k * step
        pts = origin + t * directions[active]
        idx, inside = grid.indices(pts)
        occ = inside.copy()
        occ[inside] = labels[idx[inside, 0], idx[inside, 1], idx[inside, 2]] != FREE
        if visited is not None:
            visited[np.ravel_multi_index(idx[inside].T, grid.shape)] = True
        if occ.any():
            hit = active[occ]
            t_hit[hit] = t
            i = idx[occ]
            lab[hit] = labels[i[:, 0], i[:, 1], i[:, 2]]
            active = active[~occ]
        k += 1
    return t_hit, lab


def _max_range(grid: VoxelGridSpec, origin) -> float:
    corners = np.array(np.meshgrid(*zip(grid.min_corner, grid.max_corner), indexing="ij")).reshape(3, -1).T
    return float(np.linalg.norm(corners - origin, axis=1).max())


def _pixel_rays(cam: CameraModel):
    h, w = cam.image_size
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ray = cam.unproject(u.ravel(), v.ravel(), np.ones(h * w)) - cam.center
    norm = np.linalg.norm(ray, axis=1)
    return ray / norm[:, None], norm


def render_view(labels, grid: VoxelGridSpec, cam: CameraModel):
    """Depth (camera z, meters) and label images; misses get the sentinels."""
    h, w = cam.image_size
    origin = cam.center
    dirs, norm = _pixel_rays(cam)
    t, lab = _march(labels, grid, origin, dirs, _max_range(grid, origin), grid.voxel_size / 2)
    # t is Euclidean along the ray; camera z grows by 1 per ``norm`` meters
    depth = np.where(np.isnan(t), MISS_DEPTH, t / norm)
    return depth.reshape(h, w), lab.reshape(h, w)


def render_views(labels, grid: VoxelGridSpec, rig, threads: int = 1) -> list:
    """``[(depth, semantic), ...]`` per camera by ray marching at half-voxel steps."""
    labels = np.asarray(labels)
    if threads > 1 and len(rig) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda c: render_view(labels, grid, c), rig))
    return [render_view(labels, grid, c) for c in rig]


def _camera_visibility(labels, grid: VoxelGridSpec, cam: CameraModel) -> np.ndarray:
    centers = grid.centers().reshape(-1, 3)
    target = np.arange(len(centers))
    _, _, _, ok = cam.project(centers)
    vis = np.zeros(len(centers), dtype=bool)
    cand = np.flatnonzero(ok)
    if cand.size == 0:
        return vis.reshape(grid.shape)
    origin = cam.center
    vec = centers[cand] - origin
    dist = np.linalg.norm(vec, axis=1)
    dirs = vec / dist[:, None]
    occupied = (labels != FREE).ravel()
    step = grid.voxel_size / 2
    active = np.arange(cand.size)
    blocked = np.zeros(cand.size, dtype=bool)
    k = 1
    while active.size:
        t = k * step
        active = active[t < dist[active]]
        if not active.size:
            break
        flat, inside = grid.flat_indices(origin + t * dirs[active])
        hit = inside & occupied[flat] & (flat != target[cand[active]])
        blocked[active[hit]] = True
        active = active[~hit]
        k += 1
    vis[cand[~blocked]] = True
    # everything the pixel rays pass through or stop at is seen as well
    dirs, _ = _pixel_rays(cam)
    _march(labels, grid, origin, dirs, _max_range(grid, origin), step, visited=vis)
    return vis.reshape(grid.shape)


def visibility_mask(labels, grid: VoxelGridSpec, rig, threads: int = 1) -> np.ndarray:
    """Voxels some camera sees.

    A voxel is visible to a camera when its center projects into the image and
    the segment from the optical center to it, sampled every half voxel,
    crosses no other occupied voxel. Voxels traversed by (or stopping) a pixel
    ray are visible too, so every rendered surface voxel counts even when its
    center is shadowed by neighbours of the same surface. Union over cameras.
    """
    labels = np.asarray(labels)
    if threads > 1 and len(rig) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: _camera_visibility(labels, grid, c), rig))
    else:
        parts = [_camera_visibility(labels, grid, c) for c in rig]
    out = np.zeros(grid.shape, dtype=bool)
    for p in parts:
        out |= p
    return out


def ground_truth(spec: SceneSpec, grid: VoxelGridSpec, frame: int = 0, threads: int = 1) -> OccupancyGrid:
    labels = rasterize_scene(spec, grid, frame)
    return OccupancyGrid(labels, visibility_mask(labels, grid, spec.rig, threads))


# RGB per class, loosely following common occupancy visualizations
PALETTE = np.array(
    [
        [0, 0, 0], [255, 120, 50], [255, 192, 203], [255, 255, 0], [0, 150, 245],
        [0, 255, 255], [200, 180, 0], [255, 0, 0], [255, 240, 150], [135, 60, 0],
        [160, 32, 240], [255, 0, 255], [139, 137, 137], [75, 0, 75], [150, 240, 80],
        [230, 230, 250], [0, 175, 0], [255, 255, 255],
    ],
    dtype=np.float64,
)
SKY = np.array([135.0, 180.0, 230.0])


def paint_view(depth, semantic) -> np.ndarray:
    """Flat-shaded RGB ``H x W x 3`` uint8 image from a rendered view."""
    hit = semantic != MISS_LABEL
    color = np.where(hit[..., None], PALETTE[np.where(hit, semantic, 0)], SKY)
    shade = np.where(hit, 1.0 / (1.0 + 0.02 * np.maximum(depth, 0)), 1.0)
    return np.clip(np.round(color * shade[..., None]), 0, 255).astype(np.uint8)


def render_images(labels, grid: VoxelGridSpec, rig, threads: int = 1) -> list:
    return [paint_view(d, s) for d, s in render_views(labels, grid, rig, threads)]


def simulate_lidar(labels, grid: VoxelGridSpec, origin=(0.0, 0.0, 1.8), n_azimuth=360, elevations_deg=None):
    """Spinning-LiDAR returns (hit points and labels) against the voxel scene."""
    if elevations_deg is None:
        elevations_deg = np.linspace(-25.0, 5.0, 16)
    az = np.linspace(0, 2 * math.pi, n_azimuth, endpoint=False)
    el = np.radians(np.asarray(elevations_deg, dtype=np.float64))
    A, E = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64)
    t, lab = _march(np.asarray(labels), grid, origin, dirs, _max_range(grid, origin), grid.voxel_size / 2)
    hit = ~np.isnan(t)
    return LidarFrame(origin + t[hit, None] * dirs[hit], lab[hit])


def desk_grid() -> VoxelGridSpec:
    """Occ3D extent at 0.8 m: 100 x 100 x 8 voxels."""
    return VoxelGridSpec((-40.0, -40.0, -1.0), (40.0, 40.0, 5.4), 0.8)


def demo_scene(seed: int = 0, n_frames: int = 3, rig=None, grid: VoxelGridSpec = None) -> SceneSpec:
    """A straight street: road, sidewalks, buildings, trees and traffic."""
    rng = np.random.default_rng(seed)
    cls = CLASS_NAMES.index
    prims = [
        Primitive.ground(-0.2, 0.8, cls("driveable_surface")),
        Primitive.box((0.0, 11.0, -0.6), (400.0, 6.0, 0.8), cls("sidewalk")),
        Primitive.box((0.0, -11.0, -0.6), (400.0, 6.0, 0.8), cls("sidewalk")),
        Primitive.box((0.0, 20.0, -0.6), (400.0, 12.0, 0.8), cls("terrain")),
        Primitive.box((0.0, -20.0, -0.6), (400.0, 12.0, 0.8), cls("other_flat")),
    ]
    for side in (1.0, -1.0):
        x = -38.0
        while x < 60.0:
            length = float(rng.uniform(6.0, 14.0))
            height = float(rng.uniform(3.0, 6.0))
            prims.append(Primitive.box((x + length / 2, side * 18.5, height / 2 - 0.2), (length, 5.0, height), cls("manmade")))
            x += length + float(rng.uniform(2.0, 6.0))
        for _ in range(4):
            prims.append(Primitive.box((float(rng.uniform(-36, 56)), side * 14.8, 1.8), (1.6, 1.6, 4.0), cls("vegetation")))
        for _ in range(3):
            prims.append(Primitive.box((float(rng.uniform(-36, 56)), side * 8.4, 0.4), (0.8, 0.8, 1.2), cls("barrier")))
    vehicles = [("car", (4.4, 1.8, 1.6)), ("truck", (8.0, 2.4, 3.2)), ("bus", (11.0, 2.8, 3.2))]
    for i in range(8):
        name, size = vehicles[0] if i < 6 else vehicles[1 + i % 2]
        lane = float(rng.choice([-5.2, -1.8, 1.8, 5.2]))
        x = float(rng.uniform(-34, 54))
        if abs(x) < 8 and abs(lane) < 3:
            x += 14.0
        prims.append(Primitive.box((x, lane, size[2] / 2 - 0.2), size, cls(name), yaw=float(rng.normal(0, 0.05))))
    for _ in range(4):
        prims.append(Primitive.box((float(rng.uniform(-30, 50)), float(rng.choice([-10.0, 10.0])), 0.7), (0.8, 0.8, 1.8), cls("pedestrian")))
    trajectory = [RigidTransform(translation=(2.0 * f, 0.0, 0.0)) for f in range(n_frames)]
    return SceneSpec(prims, rig or ring_rig(), trajectory, grid or desk_grid())
