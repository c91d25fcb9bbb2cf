"""Forward view transformation: depth prediction, lift and splat.

The image encoder is a deliberately tiny convolutional stub with loadable
weights; the interesting part is the geometry that follows it.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _nn
from .classes import NUM_CLASSES
from .geometry import CameraModel, VoxelGridSpec


@dataclass(frozen=True)
class DepthBinSpec:
    num_bins: int = 80
    min_depth: float = 2.0
    max_depth: float = 42.0

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("need at least two depth bins")
        if not self.max_depth > self.min_depth:
            raise ValueError("max_depth must exceed min_depth")

    @property
    def width(self) -> float:
        return (self.max_depth - self.min_depth) / self.num_bins

    def edges(self) -> np.ndarray:
        return np.linspace(self.min_depth, self.max_depth, self.num_bins + 1)

    def centers(self) -> np.ndarray:
        e = self.edges()
        return 0.5 * (e[:-1] + e[1:])

    def bin_of(self, depth: float) -> Optional[int]:
        b = int(self.bin_index(np.array([depth]))[0])
        return None if b < 0 else b

    def bin_index(self, depths) -> np.ndarray:
        """Vectorized ``bin_of``; -1 marks depths outside ``[min, max)``."""
        d = np.asarray(depths, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            inside = (d >= self.min_depth) & (d < self.max_depth)
        b = np.floor((np.where(inside, d, self.min_depth) - self.min_depth) / self.width).astype(np.int64)
        b = np.minimum(b, self.num_bins - 1)
        return np.where(inside, b, -1)


def depth_bin_edges(spec: DepthBinSpec) -> np.ndarray:
    return spec.edges()


@dataclass(frozen=True, eq=False)
class ImageFeatureMap:
    values: np.ndarray  # C x Hf x Wf
    stride: int = 16

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("feature map must be C x Hf x Wf")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class DepthDistribution:
    probs: np.ndarray  # D x Hf x Wf

    def __post_init__(self):
        p = self.probs
        if p.ndim != 3:
            raise ValueError("depth distribution must be D x Hf x Wf")
        if p.size and (p.min() < 0 or p.max() > 1):
            raise ValueError("depth probabilities must lie in [0, 1]")
        if p.size and np.abs(p.sum(axis=0) - 1).max() > 1e-5:
            raise ValueError("depth probabilities must sum to 1 per pixel")


@dataclass(frozen=True, eq=False)
class VoxelFeatureVolume:
    values: np.ndarray  # C x X x Y x Z
    grid: VoxelGridSpec

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[1:] != self.grid.shape:
            raise ValueError(f"volume shape {self.values.shape} does not match grid {self.grid.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    hidden: int = 16
    context_channels: int = 32
    depth_bins: int = 80
    num_classes: int = NUM_CLASSES
    stride: int = 16

    def weight_shapes(self) -> dict:
        h, c = self.hidden, self.in_channels
        return {
            "conv1.weight": (h, c, 3, 3),
            "conv1.bias": (h,),
            "conv2.weight": (h, h, 3, 3),
            "conv2.bias": (h,),
            "conv3.weight": (h, h, 3, 3),
            "conv3.bias": (h,),
            "context.weight": (self.context_channels, h),
            "context.bias": (self.context_channels,),
            "depth.weight": (self.depth_bins, h),
            "depth.bias": (self.depth_bins,),
            "semantic.weight": (self.num_classes, h),
            "semantic.bias": (self.num_classes,),
        }


@dataclass(eq=False)
class EncoderWeights:
    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in self.config.weight_shapes().items():
            if name not in self.tensors:
                raise ValueError(f"{name}: missing from encoder weights")
            _nn.check_shape(name, np.asarray(self.tensors[name]), shape)

    @classmethod
    def zeros(cls, config: EncoderConfig = EncoderConfig()) -> "EncoderWeights":
        return cls(config, {k: np.zeros(s) for k, s in config.weight_shapes().items()})

    @classmethod
    def random(cls, config: EncoderConfig = EncoderConfig(), seed=0, scale=0.5) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in config.weight_shapes().items():
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            tensors[name] = rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)
        return cls(config, tensors)


def patch_mean(image: np.ndarray, stride: int) -> np.ndarray:
    """``C x H x W`` -> ``C x H/stride x W/stride`` by averaging stride cells."""
    c, h, w = image.shape
    if h % stride or w % stride:
        raise ValueError(f"image size {(h, w)} is not divisible by stride {stride}")
    return image.reshape(c, h // stride, stride, w // stride, stride).mean(axis=(2, 4))


def _as_chw(image) -> np.ndarray:
    img = np.asarray(image)
    scale = 1.0 / 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) * scale
    if img.ndim == 2:
        img = img[None]
    elif img.ndim == 3 and img.shape[-1] in (1, 3, 4) and img.shape[0] not in (1, 3, 4):
        img = np.moveaxis(img, -1, 0)
    return img


def predict_depth_and_context(image, weights: EncoderWeights):
    """Stub encoder forward pass.

    ``image`` is ``H x W x 3`` (or channel-first); uint8 input is scaled to
    [0, 1]. Returns ``(ImageFeatureMap, DepthDistribution, semantic_logits)``
    where the logits are ``num_classes x Hf x Wf``.
    """
    cfg = weights.config
    x = _as_chw(image)
    if x.shape[0] != cfg.in_channels:
        raise ValueError(f"image: expected {cfg.in_channels} channels, got {x.shape[0]}")
    t = weights.tensors
    x = patch_mean(x, cfg.stride)
    x = _nn.relu(_nn.conv2d(x, t["conv1.weight"], t["conv1.bias"]))
    x = _nn.relu(_nn.conv2d(x, t["conv2.weight"], t["conv2.bias"]))
    x = _nn.relu(_nn.conv2d(x, t["conv3.weight"], t["conv3.bias"]))
    context = _nn.pointwise(x, t["context.weight"], t["context.bias"])
    depth = _nn.softmax(_nn.pointwise(x, t["depth.weight"], t["depth.bias"]), axis=0)
    semantic = _nn.pointwise(x, t["semantic.weight"], t["semantic.bias"])
    return ImageFeatureMap(context, cfg.stride), DepthDistribution(depth), semantic


def lift(features: ImageFeatureMap, depth: DepthDistribution) -> np.ndarray:
    """Per-pixel outer product: ``C x D x Hf x Wf`` frustum features."""
    f, p = features.values, depth.probs
    if f.shape[1:] != p.shape[1:]:
        raise ValueError(f"feature map {f.shape[1:]} and depth distribution {p.shape[1:]} disagree")
    return f[:, None, :, :] * p[None, :, :, :]


def feature_pixel_centers(n: int, stride: int) -> np.ndarray:
    """Image-pixel coordinate of the center of each stride cell."""
    return np.arange(n) * stride + (stride - 1) / 2.0


def frustum_points(cam: CameraModel, bins: DepthBinSpec, feature_hw, stride: int) -> np.ndarray:
    """Ego coordinates of every frustum cell, ``D x Hf x Wf x 3``."""
    hf, wf = feature_hw
    if hf * stride != cam.height or wf * stride != cam.width:
        raise ValueError(
            f"feature map {hf}x{wf} at stride {stride} does not cover image {cam.height}x{cam.width}"
        )
    d = bins.centers()[:, None, None]
    v = feature_pixel_centers(hf, stride)[None, :, None]
    u = feature_pixel_centers(wf, stride)[None, None, :]
    d, v, u = np.broadcast_arrays(d, v, u)
    return cam.unproject(u, v, d)


def splat(frustum: np.ndarray, cam: CameraModel, bins: DepthBinSpec, grid: VoxelGridSpec, stride: int = 16):
    """Sum-pool frustum features into the voxels containing their cell centers.

    Cells are visited in row-major ``(d, h, w)`` order; cells outside the grid
    are dropped.
    """
    c, d, hf, wf = frustum.shape
    if d != bins.num_bins:
        raise ValueError(f"frustum has {d} depth slices, bin spec has {bins.num_bins}")
    pts = frustum_points(cam, bins, (hf, wf), stride).reshape(-1, 3)
    flat, inside = grid.flat_indices(pts)
    flat = flat[inside]
    n = grid.num_voxels
    feats = frustum.reshape(c, -1)[:, inside]
    out = np.empty((c, n))
    for ch in range(c):
        out[ch] = np.bincount(flat, weights=feats[ch], minlength=n)
    return VoxelFeatureVolume(out.reshape((c,) + grid.shape), grid)


def encode_cameras(images: Sequence, weights: EncoderWeights, threads: int = 1) -> list:
    """Run the encoder on every camera image, preserving rig order."""
    if threads > 1 and len(images) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda im: predict_depth_and_context(im, weights), images))
    return [predict_depth_and_context(im, weights) for im in images]


def splat_cameras(encoded: Sequence, rig: Sequence[CameraModel], bins, grid, threads: int = 1):
    """Lift and splat every camera, then sum the partial volumes in rig order."""
    if not rig:
        raise ValueError("camera rig is empty")
    if len(encoded) != len(rig):
        raise ValueError(f"{len(encoded)} encoded views for {len(rig)} cameras")

    def one(pair):
        (feat, depth, _), cam = pair
        return splat(lift(feat, depth), cam, bins, grid, feat.stride).values

    pairs = list(zip(encoded, rig))
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, pairs))
    else:
        parts = [one(p) for p in pairs]
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return VoxelFeatureVolume(total, grid)


def multi_camera_forward(images, rig, weights: EncoderWeights, bins: DepthBinSpec, grid: VoxelGridSpec, threads=1):
    if not rig:
        raise ValueError("camera rig is empty")
    if len(images) != len(rig):
        raise ValueError(f"{len(images)} images for {len(rig)} cameras")
    encoded = encode_cameras(images, weights, threads)
    return splat_cameras(encoded, rig, bins, grid, threads)
