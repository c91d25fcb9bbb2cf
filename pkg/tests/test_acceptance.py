"""Acceptance criteria, one test per criterion.

Each test is named ``test_criterion_<n>_...``; conftest.py prints a PASS/FAIL
line per criterion at the end of the session.
"""
import itertools
import json
import math
import time

import numpy as np

from fbocc.backward_vtm import BackwardLayerWeights, BevFeatureMap, aggregate_hits, backward_project
from fbocc.classes import STATIC_CLASSES
from fbocc.cli import main
from fbocc.forward_vtm import DepthBinSpec, DepthDistribution, VoxelFeatureVolume, splat
from fbocc.geometry import RigidTransform, VoxelGridSpec, ring_rig
from fbocc.losses import depth_ce, dice_loss, distance_aware_focal, lovasz_softmax, scal_geo, scal_sem, semantic2d_ce
from fbocc.metrics import miou
from fbocc.occ_head import OccupancyGrid, PredictionResult, align_voxel_features, decode
from fbocc.postprocess import (
    FLIPS,
    EnsembleMember,
    TemporalRecord,
    ensemble,
    flip_volume,
    search_weights,
    temporal_tta,
    tta_flips,
)

from oracles import backward_loops, splat_loops
from published_rows import ROWS
from test_backward_vtm import random_views
from test_postprocess import simplex, validation_set


def test_criterion_1_table_metric_reproduction():
    t0 = time.perf_counter()
    for name, printed in (("MonoScene", 6.06), ("BEVDet", 11.73)):
        row = ROWS[name][0]
        got = round(miou(np.array(row + [np.nan])), 2)
        assert got == printed, name
    assert time.perf_counter() - t0 < 1.0


def test_criterion_2_grid_arithmetic():
    assert VoxelGridSpec((-40, -40, -1), (40, 40, 5.4), 0.4).shape == (200, 200, 16)
    bins = DepthBinSpec(80, 2.0, 42.0)
    assert bins.num_bins == 80
    assert bins.width == 0.5
    assert DepthBinSpec().width == 0.5 and DepthBinSpec().num_bins == 80


def test_criterion_3_splat_oracle():
    t0 = time.perf_counter()
    grid = VoxelGridSpec((-5, -5, -1), (5, 5, 3), 1.0)
    assert grid.shape == (10, 10, 4)
    bins = DepthBinSpec(8, 1.0, 9.0)
    rig = ring_rig(2, height=128, width=128, fov_deg=90, mount_height=1.0, radius=0.3)
    rng = np.random.default_rng(2024)
    for cam in rig:
        fr = rng.normal(size=(3, 8, 8, 8))
        got = splat(fr, cam, bins, grid, 16).values
        want, inside = splat_loops(fr, cam, bins, grid, 16)
        assert np.array_equal(got, want)
        assert inside.any()
        np.testing.assert_allclose(got.sum(axis=(1, 2, 3)), fr[:, inside].sum(axis=1), rtol=1e-5)
    assert time.perf_counter() - t0 < 5.0


def test_criterion_4_backward_oracle():
    grid = VoxelGridSpec((-10, -10, -1), (10, 10, 3), 1.0)
    bins = DepthBinSpec(16, 1.0, 13.0)
    rig = ring_rig(2, height=128, width=128, fov_deg=100, mount_height=1.0, radius=0.3)
    rng = np.random.default_rng(77)
    bev = BevFeatureMap(rng.normal(size=(4, 20, 20)), grid)
    views = random_views(rig, bins, rng)
    w = BackwardLayerWeights.random(4, seed=5)
    got = backward_project(bev, views, rig, bins, grid, w, 4).values
    want = backward_loops(bev.values, views, rig, bins, grid, w.weight, w.bias, 4)
    np.testing.assert_allclose(got, want, atol=1e-5)
    _, count, _ = aggregate_hits(views, rig, bins, grid, 4)
    assert (count == 0).any()
    assert np.array_equal(got[:, count == 0], bev.values[:, count == 0])


def _box_softmax_model(volume, flip):
    """Mirror-symmetric 3x3x3 box filter plus softmax: equivariant under every axis flip."""
    v = flip_volume(volume, flip)
    padded = np.pad(v, ((0, 0), (1, 1), (1, 1), (1, 1)))
    X, Y, Z = v.shape[1:]
    acc = sum(padded[:, i : i + X, j : j + Y, k : k + Z] for i, j, k in itertools.product(range(3), repeat=3))
    e = np.exp(acc - acc.max(axis=0))
    return PredictionResult(e / e.sum(axis=0))


def test_criterion_5_tta_equivariance():
    rng = np.random.default_rng(5)
    volume = rng.normal(size=(18, 6, 6, 3))
    plain = _box_softmax_model(volume, FLIPS[0])
    out = tta_flips(lambda x: x, volume, lambda v, f: _box_softmax_model(v, f))
    np.testing.assert_allclose(out.probs, plain.probs, atol=1e-6)
    # a model that ignores the flip is not equivariant; the average must still be a distribution
    noise = {f: simplex(rng, (6, 6, 3), power=3) for f in FLIPS}
    out = tta_flips(lambda f: PredictionResult(noise[f]), None, lambda _, f: f)
    assert out.probs.min() >= 0
    np.testing.assert_allclose(out.probs.sum(axis=0), 1, atol=1e-6)
    assert not np.allclose(out.probs, noise[FLIPS[0]])


def test_criterion_6_loss_floors():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 18, size=(4, 4, 2))
    gt = OccupancyGrid(labels)
    perfect = PredictionResult.one_hot(labels)
    grid = VoxelGridSpec((-2, -2, 0), (2, 2, 2), 1.0)
    for value in (distance_aware_focal(perfect, gt, grid), dice_loss(perfect, gt), scal_geo(perfect, gt),
                  scal_sem(perfect, gt), lovasz_softmax(perfect, gt)):
        assert 0 <= value < 1e-5
    bins = DepthBinSpec()
    onehot = np.zeros((80, 2, 2))
    onehot[bins.bin_of(10.1)] = 1
    assert depth_ce(DepthDistribution(onehot), {(0, 0): 10.1, (1, 1): 10.2}, bins) < 1e-5
    logits = np.full((18, 2, 2), -50.0)
    logits[3] = 50.0
    assert semantic2d_ce(logits, {(0, 1): 3}) < 1e-5

    uniform = DepthDistribution(np.full((80, 3, 3), 1 / 80))
    assert abs(depth_ce(uniform, {(0, 0): 2.0, (2, 1): 30.7, (1, 2): 41.9}, bins) - math.log(80)) < 1e-9
    assert abs(semantic2d_ce(np.zeros((18, 3, 3)), {(0, 0): 0, (1, 1): 17, (2, 2): 9}) - math.log(18)) < 1e-9

    for p in (0.0, 0.25, 0.5, 0.8, 1.0):
        col = np.full(18, (1 - p) / 17)
        col[6] = p
        got = lovasz_softmax(PredictionResult(col.reshape(18, 1, 1, 1)), OccupancyGrid(np.array([[[6]]])))
        assert got == 1 - p


def test_criterion_7_ensemble_properties():
    rng = np.random.default_rng(7)
    p = PredictionResult(simplex(rng, (4, 4, 2)))
    np.testing.assert_allclose(ensemble([EnsembleMember(p, 0.6, rng.random(18))]).probs, p.probs, atol=1e-9)
    twins = [EnsembleMember(p, 0.2, rng.random(18)), EnsembleMember(p, 0.7, rng.random(18))]
    np.testing.assert_allclose(ensemble(twins).probs, p.probs, atol=1e-9)
    mbs = [EnsembleMember(PredictionResult(simplex(rng, (4, 4, 2))), rng.random(), rng.random(18)) for _ in range(3)]
    base = ensemble(mbs).probs
    for perm in itertools.permutations(range(3)):
        np.testing.assert_allclose(ensemble([mbs[i] for i in perm]).probs, base, atol=1e-9)

    preds, gts = validation_set(70, n_frames=3, rates=(0.25, 0.3, 0.45))
    a = search_weights(preds, gts, budget=10, seed=123)
    b = search_weights(preds, gts, budget=10, seed=123)
    assert json.dumps(a.to_json()).encode() == json.dumps(b.to_json()).encode()
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.miou >= max(a.member_mious)


def test_criterion_8_end_to_end_determinism(tmp_path):
    reports = []
    for i, threads in enumerate((1, 1, 4)):
        out = tmp_path / f"report{i}.json"
        t0 = time.perf_counter()
        assert main(["--seed", "42", "--threads", str(threads), "run-pipeline", "--out", str(out)]) == 0
        assert time.perf_counter() - t0 < 60.0
        reports.append(out.read_bytes())
    assert reports[0] == reports[1] == reports[2]
    assert json.loads(reports[0])["seed"] == 42


TGRID = VoxelGridSpec((-13, -9, -1), (7, 11, 3), 2.0)


def test_criterion_9_temporal_suite():
    assert TGRID.shape == (10, 10, 2)
    rng = np.random.default_rng(9)
    vol = VoxelFeatureVolume(rng.normal(size=(3, 10, 10, 2)), TGRID)
    out = align_voxel_features(vol, RigidTransform()).values
    np.testing.assert_allclose(out[:, 1:-1, 1:-1, :], vol.values[:, 1:-1, 1:-1, :], atol=1e-6)

    # every class as the current label of every voxel, plus a mixed grid, under a spread of ego motions
    poses = [RigidTransform(), RigidTransform(translation=(2, 0, 0)), RigidTransform.from_yaw(0.7, (-3, 4, 0)),
             RigidTransform.from_yaw(-2.5, (6, -6, 0))]
    history = [TemporalRecord(PredictionResult(simplex(rng, TGRID.shape)), RigidTransform.from_yaw(rng.normal(), rng.normal(size=3) * 4))
               for _ in range(2)]
    grids = [np.full(TGRID.shape, c) for c in range(18)] + [rng.integers(0, 18, TGRID.shape)]
    replaced = 0
    for labels in grids:
        # a one-hot blended with noise keeps ``labels`` as the argmax
        cur = PredictionResult(0.5 * PredictionResult.one_hot(labels).probs + 0.5 * simplex(rng, TGRID.shape))
        assert np.array_equal(decode(cur), labels)
        dynamic = ~np.isin(labels, sorted(STATIC_CLASSES))
        for ego in poses:
            for radius in (1.0, 8.0, 100.0):
                new = temporal_tta(cur, history, ego, TGRID, near_radius=radius)
                for idx in np.ndindex(*TGRID.shape):
                    col = (slice(None),) + idx
                    if dynamic[idx]:
                        assert np.array_equal(new.probs[col], cur.probs[col]), idx
                    elif not np.array_equal(new.probs[col], cur.probs[col]):
                        replaced += 1
    assert replaced > 0
