"""Voxel/BEV fusion, the occupancy head and temporal feature alignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _nn
from .backward_vtm import BevFeatureMap
from .classes import NUM_CLASSES
from .forward_vtm import VoxelFeatureVolume
from .geometry import RigidTransform, VoxelGridSpec


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Per-voxel labels (17 = free) plus the camera visibility mask."""

    labels: np.ndarray
    camera_mask: np.ndarray = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError("labels must be X x Y x Z")
        bad = np.argwhere((labels < 0) | (labels >= NUM_CLASSES))
        if len(bad):
            raise ValueError(f"labels outside [0, {NUM_CLASSES - 1}] at indices {bad[:10].tolist()}")
        labels = labels.astype(np.int64)
        mask = np.ones(labels.shape, dtype=bool) if self.camera_mask is None else np.asarray(self.camera_mask, dtype=bool)
        if mask.shape != labels.shape:
            raise ValueError(f"camera_mask shape {mask.shape} differs from labels {labels.shape}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "camera_mask", mask)

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class PredictionResult:
    """``num_classes x X x Y x Z`` per-voxel class probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 4:
            raise ValueError("probs must be K x X x Y x Z")
        if p.size and (p.min() < -1e-12 or p.max() > 1 + 1e-12):
            raise ValueError("probabilities must lie in [0, 1]")
        if p.size and np.abs(p.sum(axis=0) - 1).max() > 1e-5:
            raise ValueError("probabilities must sum to 1 per voxel")
        object.__setattr__(self, "probs", p)

    @classmethod
    def one_hot(cls, labels, num_classes=NUM_CLASSES) -> "PredictionResult":
        labels = np.asarray(labels)
        return cls(np.moveaxis(np.eye(num_classes)[labels], -1, 0))

    @classmethod
    def uniform(cls, shape, num_classes=NUM_CLASSES) -> "PredictionResult":
        return cls(np.full((num_classes,) + tuple(shape), 1.0 / num_classes))

    @property
    def shape(self):
        return self.probs.shape[1:]


@dataclass(frozen=True)
class HeadConfig:
    channels: int = 32
    hidden: int = 32
    num_classes: int = NUM_CLASSES

    def weight_shapes(self) -> dict:
        c, h = self.channels, self.hidden
        return {
            "conv1.weight": (h, c, 3, 3, 3),
            "conv1.bias": (h,),
            "conv2.weight": (h, h, 3, 3, 3),
            "conv2.bias": (h,),
            "classifier.weight": (self.num_classes, h),
            "classifier.bias": (self.num_classes,),
        }


@dataclass(eq=False)
class HeadWeights:
    config: HeadConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in self.config.weight_shapes().items():
            if name not in self.tensors:
                raise ValueError(f"{name}: missing from head weights")
            arr = np.asarray(self.tensors[name])
            _nn.check_shape(name, arr, shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")

    @classmethod
    def zeros(cls, config: HeadConfig = HeadConfig()) -> "HeadWeights":
        return cls(config, {k: np.zeros(s) for k, s in config.weight_shapes().items()})

    @classmethod
    def random(cls, config: HeadConfig = HeadConfig(), seed=0, scale=1.0) -> "HeadWeights":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in config.weight_shapes().items():
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            tensors[name] = rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)
        return cls(config, tensors)


def expand_bev_to_voxel(bev: BevFeatureMap, Z: int = None) -> VoxelFeatureVolume:
    z = bev.grid.shape[2] if Z is None else Z
    if z != bev.grid.shape[2]:
        # volumes are always tied to a grid; a different height needs its own grid
        lo, hi = bev.grid.min_corner.copy(), bev.grid.max_corner.copy()
        hi[2] = lo[2] + z * bev.grid.voxel_size
        grid = VoxelGridSpec(lo, hi, bev.grid.voxel_size)
    else:
        grid = bev.grid
    vals = np.repeat(bev.values[..., None], z, axis=3)
    return VoxelFeatureVolume(vals, grid)


def fuse(forward_vol: VoxelFeatureVolume, expanded: VoxelFeatureVolume) -> VoxelFeatureVolume:
    if forward_vol.values.shape != expanded.values.shape:
        raise ValueError(f"cannot fuse volumes of shape {forward_vol.values.shape} and {expanded.values.shape}")
    return VoxelFeatureVolume(forward_vol.values + expanded.values, forward_vol.grid)


def head_logits(vol: VoxelFeatureVolume, weights: HeadWeights) -> np.ndarray:
    t = weights.tensors
    cin = t["conv1.weight"].shape[1]
    if vol.channels != cin:
        raise ValueError(f"conv1.weight: expects {cin} channels, volume has {vol.channels}")
    x = _nn.relu(_nn.conv3d(vol.values, t["conv1.weight"], t["conv1.bias"]))
    x = _nn.relu(_nn.conv3d(x, t["conv2.weight"], t["conv2.bias"]))
    return _nn.pointwise(x, t["classifier.weight"], t["classifier.bias"])


def head_forward(vol: VoxelFeatureVolume, weights: HeadWeights) -> PredictionResult:
    """conv3d -> ReLU -> conv3d -> ReLU -> per-voxel linear -> softmax."""
    return PredictionResult(_nn.softmax(head_logits(vol, weights), axis=0))


def decode(pred: PredictionResult) -> np.ndarray:
    """Per-voxel argmax; ties go to the smallest class id."""
    return np.argmax(pred.probs, axis=0)


def trilinear_sample(values: np.ndarray, coords: np.ndarray, padding: str = "zeros") -> np.ndarray:
    """Sample ``C x X x Y x Z`` at fractional index coordinates ``N x 3``.

    ``padding="zeros"`` treats everything beyond the grid as zero;
    ``"border"`` clamps coordinates so outputs stay convex combinations.
    """
    shape = np.array(values.shape[1:])
    q = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if padding == "border":
        q = np.clip(q, 0, shape - 1)
    elif padding != "zeros":
        raise ValueError(f"unknown padding {padding!r}")
    base = np.floor(q).astype(np.int64)
    frac = q - base
    out = np.zeros((values.shape[0], len(q)))
    for corner in np.ndindex(2, 2, 2):
        off = np.array(corner)
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        idx = np.where(ok[:, None], idx, 0)
        out += values[:, idx[:, 0], idx[:, 1], idx[:, 2]] * np.where(ok, w, 0.0)
    return out


def align_voxel_features(prev: VoxelFeatureVolume, relative_pose: RigidTransform, grid: VoxelGridSpec = None):
    """Resample a past volume into the current ego frame.

    ``relative_pose`` maps current-frame coordinates into the previous frame
    (``prev_from_current``). Samples outside the previous grid read as zero.
    """
    grid = grid or prev.grid
    centers = grid.centers().reshape(-1, 3)
    q = prev.grid.continuous_index(relative_pose.apply(centers))
    out = trilinear_sample(prev.values, q, padding="zeros")
    return VoxelFeatureVolume(out.reshape((prev.values.shape[0],) + grid.shape), grid)


def relative_pose(current_to_world: RigidTransform, previous_to_world: RigidTransform) -> RigidTransform:
    """``prev_from_current`` given both ego poses in a shared world frame."""
    return previous_to_world.inverse() @ current_to_world


def fuse_history(current: VoxelFeatureVolume, history, current_pose: RigidTransform):
    """Align ``(volume, ego_pose)`` history entries and sum them onto ``current``."""
    total = current.values.copy()
    for vol, pose in history:
        total += align_voxel_features(vol, relative_pose(current_pose, pose), current.grid).values
    return VoxelFeatureVolume(total, current.grid)

