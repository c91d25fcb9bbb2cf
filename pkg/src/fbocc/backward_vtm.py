"""Backward view transformation on BEV queries.

Voxel features are squeezed into a BEV map which then acts as the query set:
every BEV cell drops a column of reference points, projects them into the
cameras and pulls back image features weighted by how likely the predicted
depth distribution says the point is on a surface.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _nn
from .forward_vtm import DepthBinSpec, ImageFeatureMap, VoxelFeatureVolume
from .geometry import CameraModel, VoxelGridSpec


@dataclass(frozen=True, eq=False)
class BevFeatureMap:
    values: np.ndarray  # C x X x Y
    grid: VoxelGridSpec

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != self.grid.shape[:2]:
            raise ValueError(f"BEV shape {self.values.shape} does not match grid {self.grid.shape[:2]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("BEV map contains non-finite values")


@dataclass(frozen=True, eq=False)
class BackwardLayerWeights:
    weight: np.ndarray  # C x C
    bias: np.ndarray  # C

    def __post_init__(self):
        w, b = np.asarray(self.weight, dtype=np.float64), np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"backward.weight: expected a square matrix, got {w.shape}")
        _nn.check_shape("backward.bias", b, (w.shape[0],))
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("backward layer weights must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def identity(cls, channels: int) -> "BackwardLayerWeights":
        return cls(np.eye(channels), np.zeros(channels))

    @classmethod
    def random(cls, channels: int, seed=0, scale=0.5) -> "BackwardLayerWeights":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, scale / np.sqrt(channels), (channels, channels)), rng.normal(0, 0.1, channels))


def compress_voxel_to_bev(vol: VoxelFeatureVolume) -> BevFeatureMap:
    """Mean over the height axis."""
    v = vol.values
    # offset by the bottom slice so constant columns come back bit-exact
    base = v[..., 0]
    return BevFeatureMap(base + (v - base[..., None]).mean(axis=3), vol.grid)


def _bilinear(values, u, v):
    """Sample ``C x H x W`` at arrays ``u`` (width) / ``v`` (height).

    Returns ``(samples C x N, valid N)``; invalid samples are zero.
    """
    c, h, w = values.shape
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    with np.errstate(invalid="ignore"):
        valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    x0 = np.clip(np.floor(uu).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(vv).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uu - x0
    fy = vv - y0
    out = (
        values[:, y0, x0] * ((1 - fx) * (1 - fy))
        + values[:, y0, x1] * (fx * (1 - fy))
        + values[:, y1, x0] * ((1 - fx) * fy)
        + values[:, y1, x1] * (fx * fy)
    )
    return np.where(valid, out, 0.0), valid


def bilinear_sample(fmap: ImageFeatureMap, u: float, v: float) -> Optional[np.ndarray]:
    """Bilinear lookup in feature-pixel coordinates (centers at integers).

    The valid rectangle is ``[0, Wf-1] x [0, Hf-1]``; outside it, ``None``.
    """
    out, ok = _bilinear(fmap.values, [u], [v])
    return out[:, 0] if ok[0] else None


def image_to_feature_coords(p, stride: int):
    """Inverse of the stride-cell center mapping used by the forward path."""
    return (np.asarray(p) - (stride - 1) / 2.0) / stride


def reference_heights(grid: VoxelGridSpec, n_heights: int) -> np.ndarray:
    lo, hi = grid.min_corner[2], grid.max_corner[2]
    return lo + (np.arange(n_heights) + 0.5) * (hi - lo) / n_heights


def reference_points(grid: VoxelGridSpec, n_heights: int) -> np.ndarray:
    """``X x Y x n_heights x 3`` pillar sample locations."""
    X, Y, _ = grid.shape
    xs = grid.min_corner[0] + (np.arange(X) + 0.5) * grid.voxel_size
    ys = grid.min_corner[1] + (np.arange(Y) + 0.5) * grid.voxel_size
    zs = reference_heights(grid, n_heights)
    return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)


def aggregate_hits(views: Sequence, rig: Sequence[CameraModel], bins: DepthBinSpec, grid: VoxelGridSpec, n_heights: int):
    """Depth-weighted image evidence per BEV cell.

    Returns ``(weighted_sum C x X x Y, hit_count X x Y, total_weight X x Y)``.
    A hit is a reference point whose projection can be sampled in a view;
    its weight is the predicted probability of the depth bin it falls in.
    """
    if n_heights < 1:
        raise ValueError("n_heights must be >= 1")
    X, Y, _ = grid.shape
    pts = reference_points(grid, n_heights).reshape(-1, 3)
    c = views[0][0].values.shape[0]
    acc = np.zeros((c, X * Y))
    count = np.zeros(X * Y)
    total = np.zeros(X * Y)
    for (feat, depth), cam in zip(views, rig):
        s = feat.stride
        u, v, z, ok = cam.project(pts)
        fu = image_to_feature_coords(u, s)
        fv = image_to_feature_coords(v, s)
        fu = np.where(ok, fu, -1.0)
        sampled, hit = _bilinear(feat.values, fu, fv)
        b = bins.bin_index(np.where(hit, z, -1.0))
        gated = hit & (b >= 0)
        w = np.zeros(len(pts))
        if gated.any():
            idx = np.flatnonzero(gated)
            probs = depth.probs[b[idx]]  # N x Hf x Wf
            # bilinear weight of the matching bin, one slice per point
            w[idx] = _bilinear_per_point(probs, fu[idx], fv[idx])
        contrib = (sampled * w).reshape(c, X * Y, n_heights).sum(axis=2)
        acc += contrib
        count += hit.reshape(X * Y, n_heights).sum(axis=1)
        total += w.reshape(X * Y, n_heights).sum(axis=1)
    return acc.reshape(c, X, Y), count.reshape(X, Y), total.reshape(X, Y)


def _bilinear_per_point(slices, u, v):
    """Sample slice ``i`` of ``N x H x W`` at ``(u[i], v[i])``."""
    n, h, w = slices.shape
    x0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = u - x0, v - y0
    i = np.arange(n)
    out = (
        slices[i, y0, x0] * ((1 - fx) * (1 - fy))
        + slices[i, y0, x1] * (fx * (1 - fy))
        + slices[i, y1, x0] * ((1 - fx) * fy)
        + slices[i, y1, x1] * (fx * fy)
    )
    return out


def backward_project(
    bev: BevFeatureMap,
    views: Sequence,
    rig: Sequence[CameraModel],
    bins: DepthBinSpec,
    grid: VoxelGridSpec,
    weights: BackwardLayerWeights,
    n_heights: int = 4,
) -> BevFeatureMap:
    """One refinement layer.

    ``views`` holds one ``(ImageFeatureMap, DepthDistribution)`` per camera.
    Each cell becomes ``bev + W @ mean_hits(p * feature) + b``; cells whose
    hits carry no depth weight at all are returned untouched.
    """
    if len(views) != len(rig):
        raise ValueError(f"{len(views)} views for {len(rig)} cameras")
    c = bev.values.shape[0]
    if weights.weight.shape[0] != c:
        raise ValueError(f"backward.weight: expected {c} channels, got {weights.weight.shape[0]}")
    for feat, _ in views:
        if feat.values.shape[0] != c:
            raise ValueError(f"image features have {feat.values.shape[0]} channels, BEV has {c}")
    acc, count, total = aggregate_hits(views, rig, bins, grid, n_heights)
    mean = np.divide(acc, count, out=np.zeros_like(acc), where=count > 0)
    refined = bev.values + _nn.pointwise(mean, weights.weight, weights.bias)
    out = np.where(total > 0, refined, bev.values)
    return BevFeatureMap(out, grid)


def backward_refine(bev, views, rig, bins, grid, layers: Sequence[BackwardLayerWeights], n_heights=4):
    """Stack of ``backward_project`` layers (one by default)."""
    for w in layers:
        bev = backward_project(bev, views, rig, bins, grid, w, n_heights)
    return bev
