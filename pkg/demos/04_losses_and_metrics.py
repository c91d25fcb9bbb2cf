"""Training losses and the evaluation metric on a toy prediction.

Run: python demos/04_losses_and_metrics.py
"""
import math

import numpy as np

from fbocc.classes import CLASS_NAMES
from fbocc.forward_vtm import DepthBinSpec, DepthDistribution
from fbocc.geometry import VoxelGridSpec
from fbocc.losses import LossWeights, depth_ce, occupancy_losses, total_loss
from fbocc.metrics import accumulate, iou_report
from fbocc.occ_head import OccupancyGrid, PredictionResult

rng = np.random.default_rng(0)
grid = VoxelGridSpec((-4, -4, -1), (4, 4, 1), 0.5)
labels = rng.choice([4, 11, 15, 17], size=grid.shape, p=[0.05, 0.3, 0.15, 0.5])
gt = OccupancyGrid(labels)

print("perfect prediction:")
for name, value in occupancy_losses(PredictionResult.one_hot(labels), gt, grid).items():
    print(f"  {name:9s} {value:.2e}")

noisy = np.where(rng.random(labels.shape) < 0.3, rng.integers(0, 18, labels.shape), labels)
pred = PredictionResult(0.8 * PredictionResult.one_hot(noisy).probs + 0.2 / 18)
terms = occupancy_losses(pred, gt, grid)
total, _ = total_loss(terms, LossWeights())
print(f"\n30% of labels scrambled: total occupancy loss {total:.3f}")

report = iou_report(accumulate(pred.probs.argmax(axis=0), gt))
present = {k: round(v, 3) for k, v in report["per_class_iou"].items() if v is not None}
best = sorted(present.items(), key=lambda kv: -kv[1])[:3]
print(f"best classes: {best}")
print(f"mIoU over the {len(present)} classes that appear in prediction or truth: {report['miou']:.3f}")

uniform = DepthDistribution(np.full((80, 2, 2), 1 / 80))
print(f"\ndepth CE of a uniform guess is ln 80 = {math.log(80):.6f}: {depth_ce(uniform, {(0, 0): 7.3}, DepthBinSpec()):.6f}")
print(f"class {CLASS_NAMES[17]!r} is the free-space class and is excluded from mIoU")
