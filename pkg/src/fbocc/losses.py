"""Forward-only occupancy losses.

All 3D losses look only at camera-visible voxels. They are used as metrics
and regression references; nothing here computes gradients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .classes import FREE
from .forward_vtm import DepthBinSpec, DepthDistribution
from .geometry import VoxelGridSpec
from .occ_head import OccupancyGrid, PredictionResult

EPS = 1e-6
FOCAL_GAMMA = 2.0


def _visible(pred: PredictionResult, gt: OccupancyGrid, mask=None):
    """``(probs K x N, labels N)`` restricted to visible voxels."""
    if pred.probs.shape[1:] != gt.labels.shape:
        raise ValueError(f"prediction {pred.probs.shape[1:]} and ground truth {gt.labels.shape} differ")
    m = gt.camera_mask if mask is None else np.asarray(mask, dtype=bool)
    return pred.probs[:, m], gt.labels[m]


def distance_weights(grid: VoxelGridSpec) -> np.ndarray:
    """``0.5 + d / d_max`` with ``d`` the horizontal distance of each voxel center."""
    c = grid.centers()
    d = np.hypot(c[..., 0], c[..., 1])
    reach = np.maximum(np.abs(grid.min_corner[:2]), np.abs(grid.max_corner[:2]))
    return 0.5 + d / np.hypot(*reach)


def distance_aware_focal(pred: PredictionResult, gt: OccupancyGrid, grid: VoxelGridSpec, gamma=FOCAL_GAMMA) -> float:
    m = gt.camera_mask
    if not m.any():
        return 0.0
    probs, labels = _visible(pred, gt)
    pt = np.clip(probs[labels, np.arange(labels.size)], EPS, 1.0)
    w = distance_weights(grid)[m]
    return float(np.mean(w * (1 - pt) ** gamma * -np.log(pt)))


def dice_loss(pred: PredictionResult, gt: OccupancyGrid, mask=None) -> float:
    """Soft Dice averaged over classes present in the visible ground truth."""
    probs, labels = _visible(pred, gt, mask)
    present = np.unique(labels)
    if present.size == 0:
        return 0.0
    losses = []
    for c in present:
        p = probs[c]
        g = (labels == c).astype(np.float64)
        losses.append(1.0 - (2 * np.sum(p * g) + EPS) / (np.sum(p) + np.sum(g) + EPS))
    return float(np.mean(losses))


def _affinity(p, t):
    """Mean of ``-log`` precision / recall / specificity over the defined ratios.

    Precision and recall need positives in the target (precision also needs
    predicted mass); specificity needs negatives. Undefined ratios are skipped.
    """
    terms = []
    pos = np.sum(t)
    neg = np.sum(1 - t)
    if pos > 0:
        inter = np.sum(p * t)
        if np.sum(p) > 0:
            terms.append(inter / np.sum(p))
        terms.append(inter / pos)
    if neg > 0:
        terms.append(np.sum((1 - p) * (1 - t)) / neg)
    if not terms:
        return None
    return float(np.mean([-np.log(np.clip(r, EPS, 1.0)) for r in terms]))


def scal_geo(pred: PredictionResult, gt: OccupancyGrid, mask=None) -> float:
    """Scene-class affinity on occupied (0-16) versus free."""
    probs, labels = _visible(pred, gt, mask)
    if labels.size == 0:
        return 0.0
    occupied = 1.0 - probs[FREE]
    value = _affinity(occupied, (labels != FREE).astype(np.float64))
    return 0.0 if value is None else value


def scal_sem(pred: PredictionResult, gt: OccupancyGrid, mask=None) -> float:
    """Per-class scene-class affinity, averaged over classes present in the target."""
    probs, labels = _visible(pred, gt, mask)
    values = []
    for c in np.unique(labels):
        v = _affinity(probs[c], (labels == c).astype(np.float64))
        if v is not None:
            values.append(v)
    return float(np.mean(values)) if values else 0.0


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard extension w.r.t. errors sorted in decreasing order."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(pred: PredictionResult, gt: OccupancyGrid, mask=None) -> float:
    probs, labels = _visible(pred, gt, mask)
    if labels.size == 0:
        return 0.0
    losses = []
    for c in np.unique(labels):
        fg = (labels == c).astype(np.float64)
        errors = np.abs(fg - probs[c])
        order = np.argsort(-errors, kind="stable")
        losses.append(float(np.dot(errors[order], lovasz_grad(fg[order]))))
    return float(np.mean(losses))


def depth_ce(depth: DepthDistribution, gt_depth: dict, bins: DepthBinSpec) -> float:
    """Cross-entropy against one-hot depth bins.

    ``gt_depth`` maps feature-pixel ``(row, col)`` to meters; pixels outside
    the bin range are not supervised.
    """
    if depth.probs.shape[0] != bins.num_bins:
        raise ValueError(f"distribution has {depth.probs.shape[0]} bins, spec has {bins.num_bins}")
    keys = sorted(gt_depth)
    if not keys:
        return 0.0
    rows = np.array([k[0] for k in keys])
    cols = np.array([k[1] for k in keys])
    b = bins.bin_index(np.array([gt_depth[k] for k in keys]))
    sel = b >= 0
    if not sel.any():
        return 0.0
    p = depth.probs[b[sel], rows[sel], cols[sel]]
    return float(np.mean(-np.log(np.clip(p, EPS, 1.0))))


def semantic2d_ce(logits: np.ndarray, gt: dict) -> float:
    """Softmax cross-entropy over labeled feature pixels ``(row, col) -> class``."""
    keys = sorted(gt)
    if not keys:
        return 0.0
    rows = np.array([k[0] for k in keys])
    cols = np.array([k[1] for k in keys])
    cls = np.array([gt[k] for k in keys])
    z = logits[:, rows, cols]
    zmax = z.max(axis=0)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    return float(np.mean(lse - z[cls, np.arange(len(keys))]))


@dataclass(frozen=True)
class LossWeights:
    focal: float = 1.0
    dice: float = 1.0
    scal_geo: float = 1.0
    scal_sem: float = 1.0
    lovasz: float = 1.0
    depth: float = 1.0
    semantic2d: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0")


def total_loss(terms: dict, weights: LossWeights = LossWeights()) -> tuple:
    """``(total, breakdown)`` where ``breakdown[name] = weight * term``.

    Missing terms count as zero.
    """
    w = asdict(weights)
    unknown = set(terms) - set(w)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    breakdown = {k: w[k] * float(terms.get(k, 0.0)) for k in w}
    total = 0.0
    for k in w:
        total += breakdown[k]
    return total, breakdown


def occupancy_losses(pred: PredictionResult, gt: OccupancyGrid, grid: VoxelGridSpec) -> dict:
    """All five 3D terms keyed as in ``LossWeights``."""
    return {
        "focal": distance_aware_focal(pred, gt, grid),
        "dice": dice_loss(pred, gt),
        "scal_geo": scal_geo(pred, gt),
        "scal_sem": scal_sem(pred, gt),
        "lovasz": lovasz_softmax(pred, gt),
    }
