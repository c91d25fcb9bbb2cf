import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbocc.forward_vtm import DepthBinSpec, DepthDistribution
from fbocc.geometry import VoxelGridSpec
from fbocc.losses import (
    EPS,
    LossWeights,
    dice_loss,
    distance_aware_focal,
    depth_ce,
    lovasz_softmax,
    occupancy_losses,
    scal_geo,
    scal_sem,
    semantic2d_ce,
    total_loss,
)
from fbocc.occ_head import OccupancyGrid, PredictionResult

from oracles import lovasz_softmax_bruteforce

GRID_2x2 = VoxelGridSpec((-1, 0, 0), (1, 2, 1), 1.0)


def probs_from(columns, shape):
    """K x N list of per-voxel distributions -> PredictionResult of ``shape``."""
    return PredictionResult(np.asarray(columns, dtype=float).T.reshape((18,) + shape))


def random_case(seed, shape=(3, 3, 2)):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 18, size=shape)
    p = rng.random((18,) + shape) ** 2
    return PredictionResult(p / p.sum(axis=0)), OccupancyGrid(labels, rng.random(shape) < 0.8)


ALL_3D = (dice_loss, scal_geo, scal_sem, lovasz_softmax)


def test_perfect_prediction_floors():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 18, size=(4, 4, 2))
    gt = OccupancyGrid(labels)
    pred = PredictionResult.one_hot(labels)
    grid = VoxelGridSpec((-2, -2, 0), (2, 2, 2), 1.0)
    assert distance_aware_focal(pred, gt, grid) == 0.0
    assert lovasz_softmax(pred, gt) == 0.0
    for f in ALL_3D:
        assert 0 <= f(pred, gt) < 1e-5, f.__name__


def test_all_masked_is_zero():
    pred, gt = random_case(1)
    hidden = OccupancyGrid(gt.labels, np.zeros(gt.shape, bool))
    assert distance_aware_focal(pred, hidden, VoxelGridSpec((0, 0, 0), (3, 3, 2), 1.0)) == 0.0
    for f in ALL_3D:
        assert f(pred, hidden) == 0.0


def test_focal_hand_trace():
    # centers (-0.5, 0.5), (-0.5, 1.5), (0.5, 0.5), (0.5, 1.5); d_max = hypot(1, 2)
    labels = np.array([[[3], [5]], [[17], [0]]])
    pt = {(0, 0): 0.5, (0, 1): 0.25, (1, 0): 0.9, (1, 1): 1.0}
    cols = []
    for (i, j), p in sorted(pt.items()):
        col = np.full(18, (1 - p) / 17)
        col[labels[i, j, 0]] = p
        cols.append(col)
    pred = probs_from(cols, (2, 2, 1))
    want = 0.0
    for (i, j), p in pt.items():
        x, y = -0.5 + i, 0.5 + j
        w = 0.5 + math.hypot(x, y) / math.hypot(1, 2)
        want += w * (1 - p) ** 2 * -math.log(p)
    want /= 4
    assert distance_aware_focal(pred, OccupancyGrid(labels), GRID_2x2) == pytest.approx(want, abs=1e-12)


def test_focal_weights_far_voxels_more():
    labels = np.full((2, 2, 1), 4)
    pred = PredictionResult.uniform((2, 2, 1))
    near = OccupancyGrid(labels, np.array([[[True], [False]], [[False], [False]]]))
    far = OccupancyGrid(labels, np.array([[[False], [True]], [[False], [False]]]))
    assert distance_aware_focal(pred, far, GRID_2x2) > distance_aware_focal(pred, near, GRID_2x2)


def test_dice_uniform_closed_form():
    n = 8
    gt = OccupancyGrid(np.full((2, 2, 2), 6))
    got = dice_loss(PredictionResult.uniform((2, 2, 2)), gt)
    want = 1 - (2 * n / 18 + EPS) / (n / 18 + n + EPS)
    assert got == pytest.approx(want, abs=1e-12)


def test_dice_disjoint_support_near_one():
    gt = OccupancyGrid(np.full((2, 2, 2), 6))
    assert dice_loss(PredictionResult.one_hot(np.full((2, 2, 2), 7)), gt) > 1 - 1e-6


def affinity_reference(p, t):
    prec = (p * t).sum() / p.sum()
    rec = (p * t).sum() / t.sum()
    spec = ((1 - p) * (1 - t)).sum() / (1 - t).sum()
    return -(math.log(prec) + math.log(rec) + math.log(spec)) / 3


def test_scal_uniform_crafted_grid():
    labels = np.array([[[2], [17]], [[2], [9]]])
    gt = OccupancyGrid(labels)
    pred = PredictionResult.uniform((2, 2, 1))
    t_geo = np.array([1.0, 0.0, 1.0, 1.0])
    assert scal_geo(pred, gt) == pytest.approx(affinity_reference(np.full(4, 17 / 18), t_geo), abs=1e-12)
    per = []
    for c in (2, 9, 17):
        t = (labels.ravel() == c).astype(float)
        per.append(affinity_reference(np.full(4, 1 / 18), t))
    assert scal_sem(pred, gt) == pytest.approx(np.mean(per), abs=1e-12)


def test_scal_geo_all_free_skips_undefined_ratios():
    gt = OccupancyGrid(np.full((2, 2, 1), 17))
    pred = PredictionResult.uniform((2, 2, 1))
    # only specificity is defined: mean(1 - occupied prob) = 1/18
    assert scal_geo(pred, gt) == pytest.approx(-math.log(1 / 18), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 7))
def test_corrupting_a_correct_voxel_never_lowers_losses(seed, which):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 18, size=(2, 2, 2))
    pred_labels = np.where(rng.random((2, 2, 2)) < 0.3, rng.integers(0, 18, size=(2, 2, 2)), labels)
    correct = np.argwhere(pred_labels == labels)
    if len(correct) == 0:
        return
    i = tuple(correct[which % len(correct)])
    worse = pred_labels.copy()
    worse[i] = (labels[i] + 1 + rng.integers(0, 17)) % 18
    gt = OccupancyGrid(labels)
    a, b = PredictionResult.one_hot(pred_labels), PredictionResult.one_hot(worse)
    for f in (scal_geo, scal_sem, dice_loss, lovasz_softmax):
        assert f(b, gt) >= f(a, gt) - 1e-12, f.__name__


def test_lovasz_single_voxel():
    for p in (0.0, 0.3, 0.5, 0.9, 1.0):
        col = np.full(18, (1 - p) / 17)
        col[4] = p
        got = lovasz_softmax(probs_from([col], (1, 1, 1)), OccupancyGrid(np.array([[[4]]])))
        assert got == 1 - p


def test_lovasz_five_voxel_bruteforce():
    rng = np.random.default_rng(3)
    labels = np.array([1, 1, 4, 17, 1])
    p = rng.random((18, 5)) ** 3
    p /= p.sum(axis=0)
    pred = PredictionResult(p.reshape(18, 5, 1, 1))
    got = lovasz_softmax(pred, OccupancyGrid(labels.reshape(5, 1, 1)))
    assert got == pytest.approx(lovasz_softmax_bruteforce(p, labels), abs=1e-9)


def test_lovasz_random_bruteforce():
    for seed in range(5):
        pred, gt = random_case(seed, (2, 3, 2))
        m = gt.camera_mask
        want = lovasz_softmax_bruteforce(pred.probs[:, m], gt.labels[m])
        assert lovasz_softmax(pred, gt) == pytest.approx(want, abs=1e-9)


def test_invisible_voxels_do_not_matter():
    pred, gt = random_case(4)
    hidden = ~gt.camera_mask
    rng = np.random.default_rng(9)
    p2 = pred.probs.copy()
    noise = rng.random(p2.shape)
    p2[:, hidden] = (noise / noise.sum(axis=0))[:, hidden]
    labels2 = gt.labels.copy()
    labels2[hidden] = rng.integers(0, 18, size=hidden.sum())
    gt2 = OccupancyGrid(labels2, gt.camera_mask)
    grid = VoxelGridSpec((0, 0, 0), (3, 3, 2), 1.0)
    a = occupancy_losses(pred, gt, grid)
    b = occupancy_losses(PredictionResult(p2), gt2, grid)
    assert a == b


def test_semantic_losses_permutation_invariant():
    rng = np.random.default_rng(5)
    labels = np.array([[[0], [3]], [[3], [11]]])
    p = rng.random((18, 2, 2, 1)) + 0.01
    p /= p.sum(axis=0)
    pred, gt = PredictionResult(p), OccupancyGrid(labels)
    base = [f(pred, gt) for f in (dice_loss, scal_sem, lovasz_softmax)]
    grid = VoxelGridSpec((0, 0, 0), (2, 2, 1), 1.0)
    focal = distance_aware_focal(pred, gt, grid)
    movable = [0, 3, 11, 5]
    for target in itertools.permutations(movable):
        perm = np.arange(18)
        perm[movable] = target
        q = np.empty_like(p)
        q[perm] = p
        pq, gq = PredictionResult(q), OccupancyGrid(perm[labels])
        got = [f(pq, gq) for f in (dice_loss, scal_sem, lovasz_softmax)]
        np.testing.assert_allclose(got, base, atol=1e-12)
        assert distance_aware_focal(pq, gq, grid) == pytest.approx(focal, abs=1e-12)


def test_depth_ce_examples():
    bins = DepthBinSpec()
    uniform = DepthDistribution(np.full((80, 3, 4), 1 / 80))
    gt = {(0, 0): 2.0, (1, 2): 17.3, (2, 3): 41.9, (2, 0): 50.0, (1, 1): 1.0}
    assert abs(depth_ce(uniform, gt, bins) - math.log(80)) < 1e-9
    assert depth_ce(uniform, {}, bins) == 0.0
    assert depth_ce(uniform, {(0, 0): 99.0}, bins) == 0.0
    onehot = np.zeros((80, 3, 4))
    for (r, c), d in gt.items():
        b = bins.bin_of(d)
        if b is not None:
            onehot[b, r, c] = 1
    onehot[0, onehot.sum(axis=0) == 0] = 1
    assert depth_ce(DepthDistribution(onehot), gt, bins) < 1e-6


def test_depth_ce_random_oracle():
    rng = np.random.default_rng(6)
    bins = DepthBinSpec()
    p = rng.random((80, 5, 6))
    p /= p.sum(axis=0)
    gt = {(int(rng.integers(5)), int(rng.integers(6))): float(rng.uniform(0, 45)) for _ in range(10)}
    total, n = 0.0, 0
    for (r, c), d in gt.items():
        if 2 <= d < 42:
            total -= math.log(p[int((d - 2) // 0.5), r, c])
            n += 1
    assert depth_ce(DepthDistribution(p), gt, bins) == pytest.approx(total / n, abs=1e-12)


def test_semantic2d_ce_examples():
    gt = {(0, 0): 3, (1, 1): 17, (0, 1): 0}
    assert abs(semantic2d_ce(np.zeros((18, 2, 2)), gt) - math.log(18)) < 1e-9
    assert semantic2d_ce(np.zeros((18, 2, 2)), {}) == 0.0
    logits = np.full((18, 2, 2), -50.0)
    for (r, c), k in gt.items():
        logits[k, r, c] = 50.0
    assert semantic2d_ce(logits, gt) < 1e-6
    rng = np.random.default_rng(7)
    z = rng.normal(size=(18, 2, 2))
    want = np.mean([-(z[k, r, c] - math.log(np.exp(z[:, r, c]).sum())) for (r, c), k in gt.items()])
    assert semantic2d_ce(z, gt) == pytest.approx(want, abs=1e-12)


def test_total_loss():
    terms = {"focal": 0.3, "dice": 0.2, "scal_geo": 1.5, "scal_sem": 0.7, "lovasz": 0.1, "depth": 4.0, "semantic2d": 2.5}
    assert total_loss(terms, LossWeights(0, 0, 0, 0, 0, 0, 0))[0] == 0.0
    assert total_loss(terms, LossWeights(0, 0, 1, 0, 0, 0, 0))[0] == 1.5
    w = LossWeights(0.1, 2.0, 0.5, 0.25, 3.0, 0.01, 1.0)
    total, parts = total_loss(terms, w)
    dot = 0.1 * 0.3 + 2.0 * 0.2 + 0.5 * 1.5 + 0.25 * 0.7 + 3.0 * 0.1 + 0.01 * 4.0 + 1.0 * 2.5
    assert total == pytest.approx(dot, abs=1e-12)
    assert abs(sum(parts.values()) - total) < 1e-9
    with pytest.raises(ValueError):
        LossWeights(focal=-1)
    with pytest.raises(ValueError):
        total_loss({"bogus": 1.0})


def test_losses_nonnegative_on_random_inputs():
    grid = VoxelGridSpec((0, 0, 0), (3, 3, 2), 1.0)
    for seed in range(10):
        pred, gt = random_case(seed)
        vals = occupancy_losses(pred, gt, grid)
        assert all(v >= 0 for v in vals.values())
        assert vals["dice"] <= 1 and vals["lovasz"] <= 1
