"""Test-time augmentation, temporal replacement and ensembling.

Run: python demos/05_postprocess.py
"""
import numpy as np

from fbocc.classes import STATIC_CLASSES
from fbocc.geometry import RigidTransform, VoxelGridSpec
from fbocc.occ_head import OccupancyGrid, PredictionResult, decode
from fbocc.postprocess import FLIPS, EnsembleMember, TemporalRecord, ensemble, flip_volume, search_weights, temporal_tta, tta_flips

rng = np.random.default_rng(0)
grid = VoxelGridSpec((-8, -8, -1), (8, 8, 3), 1.0)
shape = grid.shape


def softmax(x):
    e = np.exp(x - x.max(axis=0))
    return e / e.sum(axis=0)


logits = rng.normal(size=(18,) + shape)
biased = np.zeros((18,) + shape)
biased[5, : shape[0] // 2] = 2.0  # a model that prefers class 5 on one side only

print(f"{len(FLIPS)} flip branches (image, x, y)")
equiv = tta_flips(lambda f: PredictionResult(softmax(flip_volume(logits, f))), None, lambda _, f: f)
print(f"flip-equivariant model: TTA changes nothing, max diff {np.abs(equiv.probs - softmax(logits)).max():.1e}")
lopsided = tta_flips(lambda f: PredictionResult(softmax(logits + biased)), None, lambda _, f: f)
print(f"lopsided model: TTA spreads the bias, still a distribution: {np.allclose(lopsided.probs.sum(axis=0), 1)}")

truth = rng.choice([1, 11, 15, 17], size=shape)
current = PredictionResult(softmax(5 * np.eye(18)[truth].transpose(3, 0, 1, 2) + rng.normal(size=(18,) + shape)))
earlier = PredictionResult.one_hot(truth)
out = temporal_tta(current, [TemporalRecord(earlier, RigidTransform())], RigidTransform(translation=(1.0, 0, 0)), grid, near_radius=4.0)
moved = np.any(out.probs != current.probs, axis=0)
static = np.isin(decode(current), sorted(STATIC_CLASSES))
print(f"\ntemporal replacement touched {moved.sum()} voxels; all of them static: {bool(static[moved].all())}")

gts = [OccupancyGrid(rng.integers(0, 18, shape)) for _ in range(2)]


def member(rate):
    return [PredictionResult(0.9 * PredictionResult.one_hot(np.where(rng.random(shape) < rate, rng.integers(0, 18, shape), g.labels)).probs + 0.1 / 18) for g in gts]


members = [member(0.3), member(0.5)]
res = search_weights(members, gts, budget=16, seed=0)
print(f"\nmember mIoUs {np.round(res.member_mious, 3)}, searched ensemble {res.miou:.3f} after {res.trials} trials")
combined = ensemble([EnsembleMember(m[0]) for m in members], np.ones(2), res.weights)
print(f"ensembled labels on frame 0 agree with truth on {(decode(combined) == gts[0].labels).mean():.1%} of voxels")
