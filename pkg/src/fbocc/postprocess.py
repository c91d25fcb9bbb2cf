"""Test-time augmentation, temporal replacement of static voxels and ensembling."""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .classes import CLASS_NAMES, NUM_CLASSES, STATIC_CLASSES
from .geometry import RigidTransform, VoxelGridSpec
from .metrics import ConfusionMatrix, accumulate, iou_per_class, miou
from .occ_head import OccupancyGrid, PredictionResult, decode, trilinear_sample


@dataclass(frozen=True)
class Flip:
    image: bool = False  # horizontal image flip
    x: bool = False  # ego x -> -x
    y: bool = False  # ego y -> -y


# fixed enumeration order keeps the TTA average bit-reproducible
FLIPS = tuple(Flip(*bits) for bits in itertools.product((False, True), repeat=3))


def flip_volume(values: np.ndarray, flip: Flip) -> np.ndarray:
    """Mirror a ``C x X x Y x Z`` volume; applying it twice is the identity."""
    axes = [a for a, on in ((1, flip.x), (2, flip.y)) if on]
    return np.flip(values, axis=axes) if axes else values


@dataclass(frozen=True, eq=False)
class CameraInputs:
    """Images and rig for one frame; ``history`` holds ``(images, prev_from_current)``."""

    images: list
    rig: list
    history: list = field(default_factory=list)


def reflect_pose(pose: RigidTransform, flip: Flip) -> RigidTransform:
    """Conjugate a rigid motion by the ego-axis reflection of ``flip``."""
    s = np.array([-1.0 if flip.x else 1.0, -1.0 if flip.y else 1.0, 1.0])
    return RigidTransform(pose.rotation * s[:, None] * s[None, :], pose.translation * s)


def flip_camera_inputs(inputs: CameraInputs, flip: Flip) -> CameraInputs:
    """Flip every image horizontally and/or reflect the ego frame seen by the rig."""

    def imgs(images):
        return [np.ascontiguousarray(np.flip(im, axis=1)) if flip.image else im for im in images]

    rig = [cam.flipped(flip.image, flip.x, flip.y) for cam in inputs.rig]
    history = [(imgs(images), reflect_pose(rel, flip)) for images, rel in inputs.history]
    return CameraInputs(imgs(inputs.images), rig, history)


def tta_flips(model: Callable, inputs, augment: Callable = flip_camera_inputs, threads: int = 1) -> PredictionResult:
    """Average ``model`` over the eight image/x/y flip combinations.

    ``augment(inputs, flip)`` builds the flipped input; the model's output is
    un-flipped in 3D before averaging. Grids must be symmetric in x and y for
    the volume flip to be a reflection of ego space. Branches may run on
    ``threads`` workers; the sum always follows ``FLIPS`` order.
    """

    def branch(flip):
        return model(augment(inputs, flip))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            preds = list(pool.map(branch, FLIPS))
    else:
        preds = [branch(f) for f in FLIPS]
    total = None
    for flip, pred in zip(FLIPS, preds):
        probs = flip_volume(pred.probs, flip)
        total = probs.copy() if total is None else total + probs
    mean = total / len(FLIPS)
    return PredictionResult(mean / mean.sum(axis=0, keepdims=True))


def check_flip_symmetric(grid: VoxelGridSpec):
    if not np.allclose(grid.min_corner[:2], -grid.max_corner[:2]):
        raise ValueError("flip TTA needs a grid centered on the ego origin in x and y")


@dataclass(frozen=True, eq=False)
class TemporalRecord:
    prediction: PredictionResult
    ego_pose: RigidTransform  # frame -> world


def temporal_tta(
    current: PredictionResult,
    history: Sequence[TemporalRecord],
    current_pose: RigidTransform,
    grid: VoxelGridSpec,
    static_classes=STATIC_CLASSES,
    near_radius: float = 8.0,
) -> PredictionResult:
    """Replace static voxels with what earlier, closer frames predicted there.

    ``history`` is ordered oldest first. For every voxel decoded as a static
    class, the most recent frame that saw the same world point within
    ``near_radius`` (horizontal distance from that frame's ego) and inside its
    grid supplies the replacement, resampled trilinearly with border clamping.
    """
    if near_radius <= 0:
        raise ValueError("near_radius must be positive")
    if not history:
        return current
    static = np.isin(decode(current), sorted(static_classes))
    idx = np.argwhere(static)
    out = current.probs.copy()
    if len(idx) == 0:
        return PredictionResult(out)
    world = current_pose.apply(grid.voxel_center(idx))
    pending = np.ones(len(idx), dtype=bool)
    for rec in reversed(history):
        local = rec.ego_pose.inverse().apply(world)
        _, inside = grid.indices(local)
        take = pending & inside & (np.hypot(local[:, 0], local[:, 1]) <= near_radius)
        if take.any():
            vals = trilinear_sample(rec.prediction.probs, grid.continuous_index(local[take]), padding="border")
            t = idx[take]
            out[:, t[:, 0], t[:, 1], t[:, 2]] = vals
            pending &= ~take
    return PredictionResult(out)


@dataclass(frozen=True, eq=False)
class EnsembleMember:
    prediction: PredictionResult
    model_miou: float = 1.0
    class_ious: np.ndarray = field(default_factory=lambda: np.ones(NUM_CLASSES))

    def __post_init__(self):
        if not 0 <= self.model_miou <= 1:
            raise ValueError("model_miou must lie in [0, 1]")
        ious = np.asarray(self.class_ious, dtype=np.float64)
        if ious.shape != (self.prediction.probs.shape[0],):
            raise ValueError(f"class_ious must have {self.prediction.probs.shape[0]} entries")
        if np.any((ious < 0) | (ious > 1)):
            raise ValueError("class_ious must lie in [0, 1]")
        object.__setattr__(self, "class_ious", ious)


def _combine(probs: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Per-class weighted mean of member probabilities (not renormalized).

    ``weights`` is ``members x classes``; a class whose weights sum to zero
    falls back to the plain mean over members.
    """
    m = len(probs)
    k = probs[0].shape[0]
    num = np.zeros_like(probs[0])
    for i in range(m):
        num += weights[i].reshape((k,) + (1,) * (probs[0].ndim - 1)) * probs[i]
    den = weights.sum(axis=0)
    out = np.empty_like(num)
    for c in range(k):
        if den[c] > 0:
            out[c] = num[c] / den[c]
        else:
            acc = probs[0][c].copy()
            for i in range(1, m):
                acc += probs[i][c]
            out[c] = acc / m
    return out


def _ensemble_table(members, model_weights=None, class_weights=None) -> np.ndarray:
    k = members[0].prediction.probs.shape[0]
    w = np.array([mb.model_miou for mb in members]) if model_weights is None else np.asarray(model_weights, float)
    v = np.stack([mb.class_ious for mb in members]) if class_weights is None else np.asarray(class_weights, float)
    if w.shape != (len(members),) or v.shape != (len(members), k):
        raise ValueError("weight overrides do not match the member list")
    if np.any(w < 0) or np.any(v < 0):
        raise ValueError("ensemble weights must be nonnegative")
    return w[:, None] * v


def ensemble(members: Sequence[EnsembleMember], model_weights=None, class_weights=None) -> PredictionResult:
    """Two-factor weighted average: member weight times per-class weight.

    Defaults use each member's mIoU and per-class IoUs. Every voxel is
    renormalized to sum to one afterwards.
    """
    if not members:
        raise ValueError("ensemble needs at least one member")
    shape = members[0].prediction.probs.shape
    for mb in members:
        if mb.prediction.probs.shape != shape:
            raise ValueError(f"member shape {mb.prediction.probs.shape} differs from {shape}")
    table = _ensemble_table(members, model_weights, class_weights)
    combined = _combine([mb.prediction.probs for mb in members], table)
    s = combined.sum(axis=0, keepdims=True)
    dead = s[0] <= 0
    if dead.any():
        plain = _combine([mb.prediction.probs for mb in members], np.zeros_like(table))
        combined[:, dead] = plain[:, dead]
        s = combined.sum(axis=0, keepdims=True)
    return PredictionResult(combined / s)


@dataclass
class WeightSearchResult:
    weights: np.ndarray  # members x classes
    miou: float
    member_mious: list
    trials: int

    def to_json(self, member_ids=None) -> dict:
        ids = member_ids or [f"member{i}" for i in range(len(self.weights))]
        return {
            "weights": {
                mid: {CLASS_NAMES[c]: float(w) for c, w in enumerate(row)} for mid, row in zip(ids, self.weights)
            },
            "miou": self.miou,
            "member_miou": dict(zip(ids, self.member_mious)),
            "trials": self.trials,
        }


def weights_from_json(obj: dict, member_ids) -> np.ndarray:
    table = obj.get("weights", obj)
    return np.array([[table[mid][name] for name in CLASS_NAMES] for mid in member_ids], dtype=np.float64)


def _frames(predictions, gts):
    if isinstance(gts, OccupancyGrid):
        gts = [gts]
    preds = [[p] if isinstance(p, PredictionResult) else list(p) for p in predictions]
    return preds, list(gts)


def search_weights(predictions, gts, budget: int = 32, seed: int = 0) -> WeightSearchResult:
    """Random search plus coordinate refinement over the ``members x classes`` table.

    ``predictions[m][f]`` is member ``m`` on validation frame ``f`` (a single
    ``PredictionResult`` per member is accepted for one frame). Every member's
    solo table is evaluated first, so the result never falls below the best
    single member. Trials only replace the incumbent when strictly better.
    """
    preds, gts = _frames(predictions, gts)
    if not gts:
        raise ValueError("validation set is empty")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not preds:
        raise ValueError("need at least one member")
    if any(len(p) != len(gts) for p in preds):
        raise ValueError("every member needs one prediction per validation frame")
    n_members = len(preds)
    k = preds[0][0].probs.shape[0]

    def score(table):
        cm = ConfusionMatrix.empty(k)
        for f, gt in enumerate(gts):
            combined = _combine([p[f].probs for p in preds], table)
            cm = accumulate(np.argmax(combined, axis=0), gt, into=cm)
        return miou(iou_per_class(cm))

    def nz(x):
        return -math.inf if math.isnan(x) else x

    member_mious = []
    best_table, best = None, -math.inf
    trials = 0
    for m in range(n_members):
        table = np.zeros((n_members, k))
        table[m] = 1.0
        s = score(table)
        member_mious.append(s)
        trials += 1
        if nz(s) > best:
            best_table, best = table, nz(s)
    if n_members == 1:
        return WeightSearchResult(best_table, member_mious[0], member_mious, trials)

    # two-factor default: member mIoU times its per-class IoU
    default = np.zeros((n_members, k))
    for m in range(n_members):
        cm = ConfusionMatrix.empty(k)
        for f, gt in enumerate(gts):
            cm = accumulate(decode(preds[m][f]), gt, into=cm)
        ious = np.nan_to_num(iou_per_class(cm))
        default[m] = max(nz(member_mious[m]), 0.0) * ious
    candidates = [default]

    rng = np.random.default_rng(seed)
    n_random = (budget + 1) // 2
    candidates += [rng.random((n_members, k)) for _ in range(n_random)]
    for table in candidates:
        s = nz(score(table))
        trials += 1
        if s > best:
            best_table, best = table, s

    coords = [(m, c) for c in range(k) for m in range(n_members)]
    for step in range(budget - n_random):
        m, c = coords[step % len(coords)]
        table = best_table.copy()
        table[m, c] = rng.random()
        s = nz(score(table))
        trials += 1
        if s > best:
            best_table, best = table, s
    return WeightSearchResult(best_table, best if best > -math.inf else float("nan"), member_mious, trials)
