"""Cameras, rigid transforms, voxel grids and LiDAR projection.

Conventions
-----------
* Camera frame: x right, y down, z along the optical axis (OpenCV).
* ``depth`` is the camera-frame z coordinate, not the ray length.
* Pixels are addressed as ``(u, v)`` with ``u`` along the image width and the
  origin at the top-left; pixel centers sit at integer coordinates.
* Voxel indices are ``(ix, iy, iz)`` and arrays are laid out ``X x Y x Z``.

Everything here is a pure function of immutable inputs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Optional, Sequence

import numpy as np

from .classes import NUM_CLASSES

_ORTHO_TOL = 1e-9


def _frozen(a, dtype=np.float64, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t`` (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation, shape=(3, 3))
        t = _frozen(self.translation, shape=(3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("rigid transform must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal (R^T R != I)")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation of ``yaw`` radians about +z followed by ``translation``."""
        c, s = math.cos(yaw), math.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, translation)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        return transform_points(points, self)

    def to_json(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RigidTransform":
        return cls(np.reshape(obj["rotation"], (3, 3)), obj["translation"])


def transform_points(points, t: RigidTransform) -> np.ndarray:
    """Apply ``t`` to an ``N x 3`` (or single 3-vector) array of points."""
    p = np.asarray(points, dtype=np.float64)
    return p @ t.rotation.T + t.translation


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera mounted on the ego vehicle.

    ``mirror_u`` marks an image that was flipped horizontally before being fed
    to the network; ``mirror_x``/``mirror_y`` mark a reflected ego frame. Both
    exist only so that flip test-time augmentation can keep the geometry exact;
    ``cam_to_ego`` itself always stays a proper rigid motion.
    """

    intrinsics: np.ndarray
    cam_to_ego: RigidTransform
    image_size: tuple
    mirror_u: bool = False
    mirror_x: bool = False
    mirror_y: bool = False

    def __post_init__(self):
        K = _frozen(self.intrinsics, shape=(3, 3))
        if not np.all(np.isfinite(K)):
            raise ValueError("intrinsics must be finite")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("intrinsics must be upper triangular with K[2,2] = 1")
        h, w = (int(x) for x in self.image_size)
        if h <= 0 or w <= 0:
            raise ValueError("image_size must be positive")
        if not isinstance(self.cam_to_ego, RigidTransform):
            raise TypeError("cam_to_ego must be a RigidTransform")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "image_size", (h, w))

    @classmethod
    def simple(cls, f, cx, cy, height, width, cam_to_ego=None) -> "CameraModel":
        K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
        return cls(K, cam_to_ego or RigidTransform(), (height, width))

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Optical center in (possibly mirrored) ego coordinates."""
        return self._ego_signs() * self.cam_to_ego.translation

    def _ego_signs(self) -> np.ndarray:
        return np.array([-1.0 if self.mirror_x else 1.0, -1.0 if self.mirror_y else 1.0, 1.0])

    def flipped(self, image=False, x=False, y=False) -> "CameraModel":
        """Same physical camera seen through an image flip and/or ego-axis flips."""
        return CameraModel(
            self.intrinsics,
            self.cam_to_ego,
            self.image_size,
            self.mirror_u ^ bool(image),
            self.mirror_x ^ bool(x),
            self.mirror_y ^ bool(y),
        )

    def project(self, points):
        """Vectorized projection of ego points.

        Returns ``(u, v, depth, valid)``; ``valid`` is False for points with
        ``depth <= 0`` or landing outside ``[0, W) x [0, H)``.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) * self._ego_signs()
        R, t = self.cam_to_ego.rotation, self.cam_to_ego.translation
        cam = (p - t) @ R
        z = cam[:, 2]
        K = self.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = cam[:, 0] / z
            yn = cam[:, 1] / z
        u = K[0, 0] * xn + K[0, 1] * yn + K[0, 2]
        v = K[1, 1] * yn + K[1, 2]
        if self.mirror_u:
            u = (self.width - 1) - u
        with np.errstate(invalid="ignore"):
            valid = (z > 0) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return u, v, z, valid

    def unproject(self, u, v, depth) -> np.ndarray:
        """Ego points at camera-frame ``depth`` behind pixels ``(u, v)``."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.asarray(depth, dtype=np.float64)
        if self.mirror_u:
            u = (self.width - 1) - u
        K = self.intrinsics
        yn = (v - K[1, 2]) / K[1, 1]
        xn = (u - K[0, 2] - K[0, 1] * yn) / K[0, 0]
        cam = np.stack(np.broadcast_arrays(xn * d, yn * d, d), axis=-1)
        ego = cam @ self.cam_to_ego.rotation.T + self.cam_to_ego.translation
        return ego * self._ego_signs()

    def to_json(self) -> dict:
        if self.mirror_u or self.mirror_x or self.mirror_y:
            raise ValueError("mirrored cameras are transient and cannot be serialized")
        return {
            "intrinsics": [float(x) for x in self.intrinsics.ravel()],
            "rotation": [float(x) for x in self.cam_to_ego.rotation.ravel()],
            "translation": [float(x) for x in self.cam_to_ego.translation],
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraModel":
        pose = RigidTransform(np.reshape(obj["rotation"], (3, 3)), obj["translation"])
        return cls(np.reshape(obj["intrinsics"], (3, 3)), pose, (obj["height"], obj["width"]))


def project_ego_point(point, cam: CameraModel) -> Optional[tuple]:
    """Project a single ego point; ``None`` when it is outside the frustum."""
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    u, v, z, ok = cam.project(point)
    if not ok[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def load_rig(source) -> list:
    """Load a camera rig from a JSON path, JSON text, or an already parsed list."""
    if isinstance(source, (str, PathLike)) and not str(source).lstrip().startswith("["):
        with open(source) as fh:
            obj = json.load(fh)
    elif isinstance(source, str):
        obj = json.loads(source)
    else:
        obj = source
    if isinstance(obj, dict):
        obj = obj["cameras"]
    return [CameraModel.from_json(c) for c in obj]


def rig_to_json(rig: Sequence[CameraModel]) -> list:
    return [c.to_json() for c in rig]


def ring_rig(n_cameras=6, height=128, width=352, fov_deg=70.0, mount_height=1.6, radius=0.5):
    """Evenly spaced outward-looking cameras around the ego origin."""
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    # optical axis along ego +x, image x along ego -y, image y along ego -z
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    rig = []
    for k in range(n_cameras):
        yaw = 2 * math.pi * k / n_cameras
        turn = RigidTransform.from_yaw(yaw)
        R = turn.rotation @ base
        t = turn.rotation @ np.array([radius, 0.0, mount_height])
        rig.append(CameraModel.simple(f, (width - 1) / 2, (height - 1) / 2, height, width, RigidTransform(R, t)))
    return rig


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    """Axis-aligned voxel grid in the ego frame."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    voxel_size: float

    def __post_init__(self):
        lo = _frozen(self.min_corner, shape=(3,))
        hi = _frozen(self.max_corner, shape=(3,))
        vs = float(self.voxel_size)
        if vs <= 0 or not np.all(hi > lo):
            raise ValueError("grid needs max_corner > min_corner and voxel_size > 0")
        n = (hi - lo) / vs
        if np.abs(n - np.round(n)).max() > 1e-6:
            raise ValueError("grid extent is not an integer number of voxels")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "_shape", tuple(int(x) for x in np.round(n)))

    @classmethod
    def occ3d(cls) -> "VoxelGridSpec":
        """The Occ3D-nuScenes layout: 200 x 200 x 16 voxels of 0.4 m."""
        return cls((-40.0, -40.0, -1.0), (40.0, 40.0, 5.4), 0.4)

    @property
    def shape(self) -> tuple:
        return self._shape

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self._shape))

    def indices(self, points):
        """Vectorized voxel lookup: ``(idx N x 3 int64, inside N bool)``."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        with np.errstate(invalid="ignore"):
            inside = np.all((p >= self.min_corner) & (p < self.max_corner), axis=1)
        q = np.floor((np.where(inside[:, None], p, self.min_corner) - self.min_corner) / self.voxel_size)
        # float rounding just below max_corner can land on n
        idx = np.minimum(q.astype(np.int64), np.array(self._shape) - 1)
        return idx, inside

    def flat_indices(self, points):
        idx, inside = self.indices(points)
        return np.ravel_multi_index(idx.T, self._shape), inside

    def voxel_center(self, index) -> np.ndarray:
        return self.min_corner + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def centers(self) -> np.ndarray:
        """``X x Y x Z x 3`` array of voxel centers."""
        axes = [self.min_corner[a] + (np.arange(n) + 0.5) * self.voxel_size for a, n in enumerate(self._shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def continuous_index(self, points) -> np.ndarray:
        """Fractional index coordinates with voxel centers at integers."""
        return (np.asarray(points, dtype=np.float64) - self.min_corner) / self.voxel_size - 0.5

    def to_json(self) -> dict:
        return {
            "min_corner": [float(x) for x in self.min_corner],
            "max_corner": [float(x) for x in self.max_corner],
            "voxel_size": self.voxel_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VoxelGridSpec":
        return cls(obj["min_corner"], obj["max_corner"], obj["voxel_size"])


def voxel_index(point, grid: VoxelGridSpec) -> Optional[tuple]:
    """Index of the voxel holding ``point`` or ``None`` outside ``[min, max)``."""
    idx, inside = grid.indices(point)
    if not inside[0]:
        return None
    return tuple(int(i) for i in idx[0])


@dataclass(frozen=True, eq=False)
class LidarFrame:
    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _frozen(self.points).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("LiDAR points must be finite")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = _frozen(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise ValueError("labels must match points")
            if lab.size and (lab.min() < 0 or lab.max() >= NUM_CLASSES):
                raise ValueError(f"labels must lie in [0, {NUM_CLASSES - 1}]")
            object.__setattr__(self, "labels", lab)

    @classmethod
    def from_text(cls, path) -> "LidarFrame":
        """Whitespace separated ``x y z [label]`` rows."""
        data = np.loadtxt(path, ndmin=2)
        if data.shape[0] == 0:
            return cls(np.zeros((0, 3)))
        if data.shape[1] == 4:
            return cls(data[:, :3], data[:, 3].astype(np.int64))
        return cls(data[:, :3])


def _round_half_up(x):
    return np.floor(x + 0.5).astype(np.int64)


def lidar_to_image(frame: LidarFrame, cam: CameraModel) -> dict:
    """Sparse depth (and label) image keyed by ``(row, col)``.

    Each in-frustum point lands on its rounded pixel; when several points
    share a pixel the nearest one is kept (ties keep the earlier point).
    Values are ``(depth, label)`` with ``label`` None for unlabeled frames.
    """
    if len(frame.points) == 0:
        return {}
    u, v, z, ok = cam.project(frame.points)
    col, row = _round_half_up(u), _round_half_up(v)
    ok &= (col < cam.width) & (row < cam.height)
    sel = np.flatnonzero(ok)
    if sel.size == 0:
        return {}
    key = row[sel] * cam.width + col[sel]
    # stable sort: by key, then depth, then original order
    order = np.lexsort((sel, z[sel], key))
    sel, key = sel[order], key[order]
    first = np.ones(len(key), dtype=bool)
    first[1:] = key[1:] != key[:-1]
    out = {}
    for i in sel[first]:
        label = None if frame.labels is None else int(frame.labels[i])
        out[(int(row[i]), int(col[i]))] = (float(z[i]), label)
    return out


def downsample_sparse(sparse: dict, stride: int) -> dict:
    """Bring a sparse pixel map to feature resolution; nearest depth wins per cell."""
    out = {}
    for (r, c), (d, lab) in sorted(sparse.items()):
        key = (r // stride, c // stride)
        if key not in out or d < out[key][0]:
            out[key] = (d, lab)
    return out


def sparse_depths(sparse: dict) -> dict:
    return {k: v[0] for k, v in sparse.items()}


def sparse_labels(sparse: dict) -> dict:
    return {k: v[1] for k, v in sparse.items() if v[1] is not None}

